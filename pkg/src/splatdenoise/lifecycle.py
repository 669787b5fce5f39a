"""Population control: relocation, Fisher-information pruning, sparse-region splits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .gaussian import Camera, Scene, logit
from .objective import l2_loss
from .optimizer import OptimizerState
from .renderer import backward, render


def relocation_opacity(o_old, n: int):
    """Opacity of each of ``n`` stacked copies so their composite equals ``o_old``."""
    if n < 1:
        raise ValueError("number of copies must be at least 1")
    o_old = np.asarray(o_old, dtype=np.float64)
    if n == 1:
        return o_old.copy() if o_old.ndim else float(o_old)
    out = -np.expm1(np.log1p(-o_old) / n)
    return out if out.ndim else float(out)


def relocation_scale_factor(o_old: float, o_new: float, n: int) -> float:
    """Scalar ``c`` with ``Sigma_new = c * Sigma_old`` for ``n`` stacked copies."""
    if n == 1:
        return 1.0
    total = 0.0
    for i in range(1, n + 1):
        for k in range(i):
            total += math.comb(i - 1, k) * (-1) ** k * o_new ** (k + 1) / math.sqrt(k + 1)
    if not total > 0.0:
        raise RuntimeError(f"relocation sum is non-positive ({total}) for o={o_old}, n={n}")
    return o_old**2 / total**2


def relocation_covariance(cov_old: np.ndarray, o_old: float, o_new: float, n: int) -> np.ndarray:
    return relocation_scale_factor(o_old, o_new, n) * np.asarray(cov_old, dtype=np.float64)


def _rewrite_stack(scene: Scene, row: int, n: int) -> None:
    """Set ``row`` to the opacity/scale of one of ``n`` stacked copies."""
    o_old = float(scene.opacities[row])
    o_new = relocation_opacity(o_old, n)
    c = relocation_scale_factor(o_old, o_new, n)
    scene.raw_opacities[row] = logit(o_new)
    if c != 1.0:
        scene.log_scales[row] += 0.5 * math.log(c)


def relocate(scene: Scene, opacity_floor: float, rng: np.random.Generator,
             state: OptimizerState | None = None, iteration: int = 0) -> list[dict]:
    """Move primitives below ``opacity_floor`` onto opaque ones, in place.

    Targets are drawn with probability proportional to opacity. A target that
    receives ``r`` clones becomes a stack of ``r + 1`` copies whose composite
    opacity and footprint match the original.
    """
    o = scene.opacities
    dead = np.flatnonzero(o < opacity_floor)
    alive = np.flatnonzero(o >= opacity_floor)
    if len(dead) == 0 or len(alive) == 0:
        return []
    p = o[alive] / o[alive].sum()
    targets = alive[rng.choice(len(alive), size=len(dead), replace=True, p=p)]
    received = np.bincount(targets, minlength=len(scene))
    for t in np.flatnonzero(received):
        _rewrite_stack(scene, t, int(received[t]) + 1)
    for name in ("means", "log_scales", "rotations", "raw_opacities", "sh_dc"):
        arr = getattr(scene, name)
        arr[dead] = arr[targets]
    scene.stream_ids[dead] = scene.allocate_streams(len(dead))
    if state is not None:
        state.reset_rows(dead)
        state.reset_rows(np.flatnonzero(received))
    return [{"event": "relocate", "iteration": iteration, "primitive": int(d), "target": int(t)}
            for d, t in zip(dead, targets)]


@dataclass
class FisherAccumulator:
    """Per-primitive 6x6 sums of gradient outer products over (mean, scale)."""

    matrices: np.ndarray
    views_accumulated: int = 0

    @classmethod
    def zeros(cls, n: int) -> "FisherAccumulator":
        return cls(np.zeros((n, 6, 6)))

    def add(self, grads6: np.ndarray) -> None:
        self.matrices += grads6[:, :, None] * grads6[:, None, :]
        self.views_accumulated += 1


def fisher_gradients(scene: Scene, camera: Camera, target: np.ndarray, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(n, 6) gradients of the squared-error loss w.r.t. mean and scale."""
    out = render(scene, camera, background)
    _, d_rgb = l2_loss(out.rgb, target)
    g = backward(scene, camera, out, d_rgb)
    return np.concatenate([g.d_mean, g.d_log_scale / scene.scales], axis=1)


def fisher_accumulate(acc: FisherAccumulator, scene: Scene, cameras, targets,
                      background=(0.0, 0.0, 0.0)) -> FisherAccumulator:
    if len(cameras) != len(targets):
        raise ValueError("cameras and targets must be aligned")
    if acc.matrices.shape[0] != len(scene):
        raise ValueError("accumulator size does not match the scene")
    for cam, target in zip(cameras, targets):
        acc.add(fisher_gradients(scene, cam, target, background))
    return acc


def uncertainty_scores(acc: FisherAccumulator) -> np.ndarray:
    """Sum of singular values of each Fisher matrix (small = uncertain)."""
    if acc.views_accumulated < 1:
        raise ValueError("no views accumulated")
    return np.linalg.svd(acc.matrices, compute_uv=False).sum(axis=1)


def uncertainty_trace(acc: FisherAccumulator) -> np.ndarray:
    """Trace of each Fisher matrix; equals the singular-value sum for PSD input."""
    return np.trace(acc.matrices, axis1=1, axis2=2)


def _count(fraction: float, n: int) -> int:
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    return min(n, math.ceil(fraction * n - 1e-9))


def prune_uncertain(scene: Scene, scores: np.ndarray, fraction: float,
                    state: OptimizerState | None = None) -> tuple[Scene, np.ndarray]:
    """Drop the ``ceil(fraction * n)`` lowest-scoring primitives (ties: lower index)."""
    n = len(scene)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise ValueError("scores must cover every primitive")
    removed = np.sort(np.lexsort((np.arange(n), scores))[:_count(fraction, n)])
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    if state is not None:
        state.keep(keep)
    return scene.subset(keep), removed


def knn_sparsity(means: np.ndarray, k: int, method: str = "kdtree") -> np.ndarray:
    """Mean squared distance from each point to its ``k`` nearest other points."""
    means = np.asarray(means, dtype=np.float64)
    n = len(means)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    if method == "brute":
        d2 = np.sum((means[:, None, :] - means[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        nearest = np.sort(d2, axis=1)[:, :k]
    elif method == "kdtree":
        _, idx = cKDTree(means).query(means, k=k + 1)
        rows = np.arange(n)[:, None]
        # drop self; with duplicate points self may not be listed first
        is_self = idx == rows
        drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
        mask = np.ones_like(idx, dtype=bool)
        mask[np.arange(n), drop] = False
        nbr = idx[mask].reshape(n, k)
        nearest = np.sort(np.sum((means[:, None, :] - means[nbr]) ** 2, axis=-1), axis=1)
    else:
        raise ValueError(f"unknown method {method!r}")
    total = np.zeros(n)
    for j in range(k):
        total = total + nearest[:, j]
    return total / k


def refine_sparse(scene: Scene, densify_fraction: float, k: int = 3,
                  state: OptimizerState | None = None, iteration: int = 0) -> list[dict]:
    """Split the sparsest primitives into two co-located copies, in place."""
    n = len(scene)
    count = _count(densify_fraction, n)
    if count == 0 or n <= k:
        return []
    d = knn_sparsity(scene.means, k)
    chosen = np.lexsort((np.arange(n), -d))[:count]
    for row in chosen:
        _rewrite_stack(scene, row, 2)
    clone = scene.subset(chosen)
    scene.append(clone, fresh_streams=True)
    if state is not None:
        state.reset_rows(chosen)
        state.grow(len(chosen))
    return [{"event": "split", "iteration": iteration, "primitive": int(r), "new": n + j}
            for j, r in enumerate(chosen)]
