"""Seeded synthetic scenes that stand in for a noisy structure-from-motion start."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .gaussian import Camera, Scene, logit, rgb_to_sh
from .renderer import render


@dataclass
class SyntheticSceneSpec:
    primitive_count: int = 100
    extent: float = 1.0  # half-width of the cube holding the means
    opacity_range: tuple[float, float] = (0.6, 0.95)
    scale_range: tuple[float, float] = (0.06, 0.18)
    camera_count: int = 10
    camera_radius: float = 3.5
    camera_elevation: float = 0.8  # alternating +/- height of the ring cameras
    resolution: int = 64
    focal: float = 70.0
    mean_noise: float = 0.05  # std of mean perturbation, as a fraction of extent
    scale_noise: float = 0.1  # std of log-scale perturbation
    outlier_fraction: float = 0.0  # spurious primitives added to the init, per GT primitive
    outlier_spread: float = 1.5  # outliers fill a cube this many extents wide (half-width)
    missing_fraction: float = 0.0  # GT primitives absent from the init
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.primitive_count < 1 or self.camera_count < 1:
            raise ValueError("need at least one primitive and one camera")


@dataclass
class SyntheticData:
    ground_truth: Scene
    cameras: list[Camera]
    targets: list[np.ndarray]
    init: Scene


def camera_ring(spec: SyntheticSceneSpec) -> list[Camera]:
    cams = []
    for i in range(spec.camera_count):
        theta = 2.0 * np.pi * i / spec.camera_count
        height = spec.camera_elevation * (1 if i % 2 == 0 else -1)
        eye = (spec.camera_radius * np.cos(theta), spec.camera_radius * np.sin(theta), height)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), spec.focal,
                                   (spec.resolution, spec.resolution)))
    return cams


def ground_truth_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Scene:
    n = spec.primitive_count
    lo, hi = spec.scale_range
    q = rng.standard_normal((n, 4))
    return Scene(
        means=rng.uniform(-spec.extent, spec.extent, (n, 3)),
        log_scales=rng.uniform(np.log(lo), np.log(hi), (n, 3)) + np.log(spec.extent),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        raw_opacities=logit(rng.uniform(*spec.opacity_range, n)),
        sh_dc=rgb_to_sh(rng.uniform(0.05, 0.95, (n, 3))),
        rng_seed=spec.seed,
    )


def synthesize(spec: SyntheticSceneSpec, background=(0.0, 0.0, 0.0)) -> SyntheticData:
    """Ground truth, ring cameras, rendered targets and a perturbed initial scene."""
    rng = np.random.default_rng(spec.seed)
    gt = ground_truth_scene(spec, rng)
    cams = camera_ring(spec)
    targets = [render(gt, cam, background).rgb for cam in cams]
    init = gt.copy()
    n = len(gt)
    mean_eps = rng.standard_normal((n, 3))
    scale_eps = rng.standard_normal((n, 3))
    if spec.mean_noise > 0:
        init.means = init.means + spec.mean_noise * spec.extent * mean_eps
    if spec.scale_noise > 0:
        init.log_scales = init.log_scales + spec.scale_noise * scale_eps
    out_rng = np.random.default_rng([spec.seed, 1])
    n_missing = int(round(spec.missing_fraction * n))
    if n_missing:
        keep = np.ones(n, dtype=bool)
        keep[out_rng.choice(n, size=n_missing, replace=False)] = False
        init = init.subset(keep)
        init.stream_ids = np.arange(len(init))
        init.next_stream_id = len(init)
    n_out = int(round(spec.outlier_fraction * n))
    if n_out:
        outliers = ground_truth_scene(dataclasses.replace(spec, primitive_count=n_out), out_rng)
        outliers.means = out_rng.uniform(-1.0, 1.0, (n_out, 3)) * spec.outlier_spread * spec.extent
        init.append(outliers)
    return SyntheticData(gt, cams, targets, init)


def split_views(n_views: int, every: int = 8) -> tuple[list[int], list[int]]:
    """Indices of training and held-out views; every ``every``-th view is held out."""
    test = [i for i in range(n_views) if i % every == 0]
    train = [i for i in range(n_views) if i % every != 0]
    return train, test
