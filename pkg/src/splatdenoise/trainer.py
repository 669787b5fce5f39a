"""Training loop, stage scheduling and evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .gaussian import Camera, Scene
from .lifecycle import (FisherAccumulator, fisher_accumulate, prune_uncertain, refine_sparse,
                        relocate, uncertainty_scores, uncertainty_trace)
from .objective import compute_loss, psnr, ssim
from .optimizer import (AUTO_NOISE, PARAMS, DenoiseOptimizer, DivergenceError, OptimizerState,
                        adam_step)
from .renderer import backward, render

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "l1", "dssim", "total", "psnr", "ssim", "primitive_count")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Scene, iteration: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def evaluate(scene: Scene, cameras, targets, background=(0.0, 0.0, 0.0)) -> EvalReport:
    images = [render(scene, cam, background).rgb for cam in cameras]
    return EvalReport([psnr(im, t) for im, t in zip(images, targets)],
                      [ssim(im, t) for im, t in zip(images, targets)])


@dataclass
class Schedule:
    relocation: set[int] = field(default_factory=set)
    prune: set[int] = field(default_factory=set)
    refine: set[int] = field(default_factory=set)


def build_schedule(cfg: TrainConfig) -> Schedule:
    """Iterations (1-based, after the optimizer step) at which each stage fires."""
    lc, n = cfg.lifecycle, cfg.max_steps
    sched = Schedule()
    if cfg.stages.relocation:
        until = int(round(lc.relocation_until * n))
        sched.relocation = set(range(lc.relocation_interval, until + 1, lc.relocation_interval))
    if cfg.stages.pruning and lc.prune_fraction > 0:
        sched.prune = {int(round(lc.prune_at * n))}
    if cfg.stages.refinement and lc.densify_fraction > 0 and lc.refinement_rounds > 0:
        points = np.linspace(lc.refine_start, lc.refine_end, lc.refinement_rounds)
        sched.refine = {int(round(p * n)) for p in points}
    inside = lambda s: {i for i in s if 0 < i < n}
    return Schedule(inside(sched.relocation), inside(sched.prune), inside(sched.refine))


def scene_extent(scene: Scene) -> float:
    if len(scene) == 0:
        return 1.0
    return float(np.max(np.linalg.norm(scene.means - scene.means.mean(axis=0), axis=1)))


def resolve_tau(cfg: TrainConfig, scene: Scene) -> float:
    if cfg.explore.tau != "auto":
        return float(cfg.explore.tau)
    return (AUTO_NOISE * scene_extent(scene)) ** 2 / (2.0 * cfg.lr.mean_init)


@dataclass
class TrainResult:
    scene: Scene
    state: OptimizerState
    metrics: list[dict] = field(default_factory=list)
    mutations: list[dict] = field(default_factory=list)


def _grads_dict(g) -> dict[str, np.ndarray]:
    return {"means": g.d_mean, "log_scales": g.d_log_scale, "rotations": g.d_rotation,
            "raw_opacities": g.d_raw_opacity, "sh_dc": g.d_sh_dc}


def adam_baseline_step(scene: Scene, state: OptimizerState, grads: dict, cfg: TrainConfig) -> None:
    """Plain Adam on every parameter group, the reference path for comparisons."""
    deltas = adam_step(state, grads, cfg.lr.lrs(state.step_count, cfg.max_steps))
    for name in PARAMS:
        setattr(scene, name, getattr(scene, name) + deltas[name])
    for name in PARAMS:
        if not np.all(np.isfinite(getattr(scene, name))):
            raise DivergenceError(f"non-finite {name} after step {state.step_count}")


def train(init: Scene, cameras: list[Camera], targets: list[np.ndarray], cfg: TrainConfig,
          holdout: tuple[list[Camera], list[np.ndarray]] | None = None,
          state: OptimizerState | None = None) -> TrainResult:
    """Optimize a copy of ``init`` against the training views.

    Views are visited round-robin. Metrics are logged every
    ``cfg.eval_interval`` steps and at the end, scored on ``holdout`` when
    given and on the training views otherwise.
    """
    if len(cameras) < 2 or len(cameras) != len(targets):
        raise ValueError("training needs at least two aligned camera/target pairs")
    scene = init.copy()
    state = state or OptimizerState.for_scene(scene)
    bg = np.asarray(cfg.background, dtype=np.float64)
    explore = dataclasses.replace(cfg.explore, tau=resolve_tau(cfg, scene))
    opt = DenoiseOptimizer(cfg.lr, cfg.max_steps, explore, exploration=True, noise_seed=cfg.seed)
    sched = build_schedule(cfg)
    eval_cams, eval_targets = holdout if holdout is not None else (cameras, targets)
    result = TrainResult(scene, state)
    checkpoint = scene.copy()
    start = state.step_count

    for it in range(start + 1, cfg.max_steps + 1):
        view = (it - 1) % len(cameras)
        out = render(scene, cameras[view], bg)
        loss = compute_loss(out.rgb, targets[view], cfg.lambda_ssim)
        if not np.isfinite(loss.total):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", checkpoint, it)
        grads = _grads_dict(backward(scene, cameras[view], out, loss.d_total_d_rgb))
        try:
            if cfg.stages.exploration:
                opt.step(scene, state, grads)
            else:
                adam_baseline_step(scene, state, grads, cfg)
        except DivergenceError as exc:
            raise TrainingDiverged(str(exc), checkpoint, it) from exc

        if it in sched.relocation:
            rng = np.random.default_rng([cfg.seed, it])
            result.mutations += relocate(scene, cfg.lifecycle.opacity_floor, rng, state, it)
        if it in sched.prune:
            acc = fisher_accumulate(FisherAccumulator.zeros(len(scene)), scene, cameras, targets, bg)
            scores = uncertainty_scores(acc)
            if not np.allclose(scores, uncertainty_trace(acc), rtol=1e-9, atol=1e-300):
                log.warning("singular-value sum and trace disagree at iteration %d", it)
            scene_ids = scene.stream_ids.copy()
            pruned, removed = prune_uncertain(scene, scores, cfg.lifecycle.prune_fraction, state)
            result.mutations += [{"event": "prune", "iteration": it, "primitive": int(r),
                                  "stream": int(scene_ids[r]), "score": float(scores[r])}
                                 for r in removed]
            scene = result.scene = pruned
        if it in sched.refine:
            result.mutations += refine_sparse(scene, cfg.lifecycle.densify_fraction,
                                              cfg.lifecycle.knn_k, state, it)

        if it % cfg.eval_interval == 0 or it == cfg.max_steps:
            report = evaluate(scene, eval_cams, eval_targets, bg)
            row = {"iteration": it, "l1": loss.l1, "dssim": loss.dssim, "total": loss.total,
                   "psnr": report.mean_psnr, "ssim": report.mean_ssim, "primitive_count": len(scene)}
            result.metrics.append(row)
            log.info("it %d loss %.5f psnr %.2f n=%d", it, loss.total, report.mean_psnr, len(scene))
            checkpoint = scene.copy()
    return result


def format_metrics_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_FIELDS)]
    for row in rows:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in METRIC_FIELDS))
    return "\n".join(lines) + "\n"
