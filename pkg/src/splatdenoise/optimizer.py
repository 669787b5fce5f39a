"""Adam baseline and the denoising update for primitive means.

The mean update combines the Adam step with three extra terms:
shape-aware Langevin noise, a drift along an exponential moving average of
past mean gradients, and an axis-aligned correction that fires when the
dominant local-frame mean gradient and the dominant scale gradient share an
axis. Every other parameter receives a plain Adam step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianPrimitive, Scene, quat_to_rotmat, sigmoid

PARAMS = ("means", "log_scales", "rotations", "raw_opacities", "sh_dc")


class DivergenceError(RuntimeError):
    """A parameter update produced a non-finite value."""


@dataclass
class LRSchedule:
    """Per-group learning rates; the mean rate decays exponentially."""

    mean_init: float = 1.6e-3
    mean_final: float = 1.6e-5
    log_scales: float = 5e-3
    rotations: float = 1e-3
    raw_opacities: float = 2.5e-2
    sh_dc: float = 2.5e-3

    def mean_lr(self, step: int, max_steps: int) -> float:
        r = min(max(step / max_steps, 0.0), 1.0)
        return math.exp((1.0 - r) * math.log(self.mean_init) + r * math.log(self.mean_final))

    def lrs(self, step: int, max_steps: int) -> dict[str, float]:
        return {"means": self.mean_lr(step, max_steps), "log_scales": self.log_scales,
                "rotations": self.rotations, "raw_opacities": self.raw_opacities,
                "sh_dc": self.sh_dc}


AUTO_NOISE = 5e-4


@dataclass
class ExploreConfig:
    # "auto": chosen so that sqrt(2 * lr_init * tau) = AUTO_NOISE * scene extent
    tau: float | str = "auto"
    alpha: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.5
    gate_sharpness: float = 100.0
    gate_threshold: float = 0.005
    # -1 moves against the local gradient (descent); +1 follows its raw sign
    denoise_sign: float = -1.0
    # scale the correction by lr_t / lr_init so it anneals with the mean learning rate
    denoise_anneal: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")
        if not 0.0 <= self.beta2 <= 1.0:
            raise ValueError("beta2 must lie in [0, 1]")
        if self.tau != "auto" and not float(self.tau) >= 0.0:
            raise ValueError("tau must be non-negative or 'auto'")
        if self.denoise_sign not in (1.0, -1.0):
            raise ValueError("denoise_sign must be +1 or -1")


@dataclass
class OptimizerState:
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    explore_momentum: np.ndarray
    prev_mean_grad: np.ndarray
    step_count: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-15

    @classmethod
    def for_scene(cls, scene: Scene, **kwargs) -> "OptimizerState":
        n = len(scene)
        zeros = {k: np.zeros_like(getattr(scene, k)) for k in PARAMS}
        return cls(zeros, {k: v.copy() for k, v in zeros.items()},
                   np.zeros((n, 3)), np.zeros((n, 3)), **kwargs)

    def __len__(self) -> int:
        return len(self.explore_momentum)

    def keep(self, index) -> None:
        """Retain only the rows selected by ``index``."""
        for d in (self.adam_m, self.adam_v):
            for k in d:
                d[k] = d[k][index]
        self.explore_momentum = self.explore_momentum[index]
        self.prev_mean_grad = self.prev_mean_grad[index]

    def reset_rows(self, rows) -> None:
        for d in (self.adam_m, self.adam_v):
            for k in d:
                d[k][rows] = 0.0
        self.explore_momentum[rows] = 0.0
        self.prev_mean_grad[rows] = 0.0

    def grow(self, count: int) -> None:
        """Append ``count`` fresh rows."""
        for d in (self.adam_m, self.adam_v):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros((count,) + d[k].shape[1:])])
        self.explore_momentum = np.concatenate([self.explore_momentum, np.zeros((count, 3))])
        self.prev_mean_grad = np.concatenate([self.prev_mean_grad, np.zeros((count, 3))])


def adam_step(state: OptimizerState, grads: dict[str, np.ndarray], lrs: dict[str, float]) -> dict[str, np.ndarray]:
    """Advance the step counter and return bias-corrected Adam deltas per group."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    deltas = {}
    for name, g in grads.items():
        m = state.adam_m[name] = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = state.adam_v[name] = b2 * state.adam_v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        deltas[name] = -lrs[name] * m_hat / (np.sqrt(v_hat) + state.eps)
    return deltas


def opacity_gate(opacity, cfg: ExploreConfig):
    return sigmoid(-cfg.gate_sharpness * (np.asarray(opacity) - cfg.gate_threshold))


def exploration_factor(log_scales, rotations, opacities, lr_mean: float, cfg: ExploreConfig) -> np.ndarray:
    """Matrices ``L`` with noise ``= L @ xi``; ``L L^T = 2 lr tau gate^2 Sigma``.

    ``Sigma^(1/2) = R S R^T`` is the symmetric square root of ``R S^2 R^T``.
    """
    R = quat_to_rotmat(rotations)
    sqrt_cov = (R * np.exp(log_scales)[..., None, :]) @ np.swapaxes(R, -1, -2)
    amp = math.sqrt(2.0 * lr_mean * cfg.tau) * opacity_gate(opacities, cfg)
    return np.asarray(amp)[..., None, None] * sqrt_cov


def sample_exploration_noise(primitive: GaussianPrimitive, lr_mean: float, cfg: ExploreConfig,
                             rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    L = exploration_factor(primitive.log_scale, primitive.rotation, primitive.opacity, lr_mean, cfg)
    xi = rng.standard_normal(3 if size is None else (size, 3))
    return xi @ L.T


def stream_normals(seed: int, step: int, stream_ids: np.ndarray) -> np.ndarray:
    """Standard normal 3-vectors, one per stream id, for a given step.

    Counter-based: row ``s`` depends only on ``(seed, step, s)``, never on how
    many primitives exist or in which order they are processed.
    """
    stream_ids = np.asarray(stream_ids, dtype=np.int64)
    if stream_ids.size == 0:
        return np.zeros((0, 3))
    key = np.array([seed % 2**64, step], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    block = gen.standard_normal((int(stream_ids.max()) + 1, 3))
    return block[stream_ids]


def update_momentum(state: OptimizerState, prev_mean_grad: np.ndarray, beta1: float) -> np.ndarray:
    state.explore_momentum = beta1 * state.explore_momentum + (1.0 - beta1) * prev_mean_grad
    return state.explore_momentum


def spatial_denoise_term(rotation, mean_grad, scale_grad, sign: float = 1.0) -> np.ndarray:
    """World-frame correction ``R @ dmu`` for one primitive or a batch.

    ``rotation`` is a quaternion (or batch); ``scale_grad`` must be taken with
    respect to the scales themselves, not their logs. The correction is
    non-zero only when the largest-magnitude component of ``R^T mean_grad``
    and of ``scale_grad`` sit on the same local axis (ties go to the lowest
    axis); its length is ``|scale_grad[j]|`` and its sign follows the local
    mean gradient.
    """
    R = quat_to_rotmat(rotation)
    mean_grad = np.asarray(mean_grad, dtype=np.float64)
    scale_grad = np.asarray(scale_grad, dtype=np.float64)
    single = mean_grad.ndim == 1
    if single:
        R, mean_grad, scale_grad = R[None], mean_grad[None], scale_grad[None]
    local = np.einsum("nji,nj->ni", R, mean_grad)
    j = np.argmax(np.abs(local), axis=1)
    k = np.argmax(np.abs(scale_grad), axis=1)
    rows = np.arange(len(local))
    lj = local[rows, j]
    sj = scale_grad[rows, j]
    active = (j == k) & (lj != 0.0) & (sj != 0.0)
    dmu = np.zeros_like(local)
    dmu[rows[active], j[active]] = sign * np.abs(sj[active]) * np.sign(lj[active])
    world = np.einsum("nij,nj->ni", R, dmu)
    return world[0] if single else world


@dataclass
class DenoiseOptimizer:
    """Applies one optimization step to a whole scene."""

    schedule: LRSchedule
    max_steps: int
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    exploration: bool = True
    noise_seed: int = 0

    def step(self, scene: Scene, state: OptimizerState, grads: dict[str, np.ndarray]) -> None:
        """In-place update; ``grads`` maps parameter-group names to gradients."""
        lrs = self.schedule.lrs(state.step_count, self.max_steps)
        deltas = adam_step(state, grads, lrs)
        for name in PARAMS:
            if name == "means" and self.exploration:
                continue
            setattr(scene, name, getattr(scene, name) + deltas[name])
        if self.exploration:
            scene.means = apply_mean_update(state, scene, grads["means"], grads["log_scales"],
                                            deltas["means"], lrs["means"], self.explore,
                                            self.noise_seed, state.step_count,
                                            lrs["means"] / self.schedule.mean_init)
        for name in PARAMS:
            if not np.all(np.isfinite(getattr(scene, name))):
                raise DivergenceError(f"non-finite {name} after step {state.step_count}")


def apply_mean_update(state: OptimizerState, scene: Scene, mean_grad: np.ndarray,
                      log_scale_grad: np.ndarray, adam_delta: np.ndarray, lr_mean: float,
                      cfg: ExploreConfig, noise_seed: int, step: int,
                      lr_ratio: float = 1.0) -> np.ndarray:
    """New means: Adam step + exploration noise - momentum drift + correction.

    The drift uses momentum built from the previous step's gradient; the
    current gradient is stored for the next call. Disabled terms (zero
    coefficient) are skipped so the result reduces bitwise to Adam.
    """
    m = update_momentum(state, state.prev_mean_grad, cfg.beta1)
    new = scene.means + adam_delta
    if cfg.tau > 0.0:
        L = exploration_factor(scene.log_scales, scene.rotations, scene.opacities, lr_mean, cfg)
        xi = stream_normals(noise_seed, step, scene.stream_ids)
        new = new + np.einsum("nij,nj->ni", L, xi)
    if cfg.alpha > 0.0:
        new = new - cfg.alpha * lr_mean * m
    if cfg.beta2 > 0.0:
        scale_grad = log_scale_grad / np.exp(scene.log_scales)
        beta2 = cfg.beta2 * lr_ratio if cfg.denoise_anneal else cfg.beta2
        new = new + beta2 * spatial_denoise_term(scene.rotations, mean_grad, scale_grad,
                                                     cfg.denoise_sign)
    state.prev_mean_grad = np.array(mean_grad, dtype=np.float64)
    if not np.all(np.isfinite(new)):
        bad = np.flatnonzero(~np.all(np.isfinite(new), axis=1))
        raise DivergenceError(f"non-finite mean for primitives {bad[:10].tolist()} at step {step}")
    return new
