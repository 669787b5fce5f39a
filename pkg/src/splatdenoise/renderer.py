"""Software splat renderer with an exact analytic backward pass.

Projection and the covariance chain rule are vectorized over primitives in
numpy; the per-pixel compositing loops are compiled with numba. All
reductions in the backward kernel run in a fixed raster order so gradients
are bitwise reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from .gaussian import SH_C0, Camera, Scene, build_covariance, quat_to_rotmat

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
LOWPASS = 0.3
NEAR_PLANE = 0.2
TILE = 16

# the forward kernel only needs a plain fork-join pool; this layer ships with numba
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


@dataclass
class Projection:
    """Screen-space quantities of the primitives visible in one view."""

    index: np.ndarray  # visible primitive ids, front-to-back
    cam_points: np.ndarray  # (P, 3)
    uv: np.ndarray  # (P, 2)
    jacobian: np.ndarray  # (P, 2, 3)
    cov3d: np.ndarray  # (P, 3, 3)
    cov2d: np.ndarray  # (P, 2, 2), low-pass floor included
    conic: np.ndarray  # (P, 3): a, b, c of the inverse 2D covariance
    opacity: np.ndarray  # (P,)
    color: np.ndarray  # (P, 3)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) entries of the tile list consumed per pixel
    tile_offsets: np.ndarray
    tile_entries: np.ndarray  # positions into ``projection.index``
    projection: Projection
    background: np.ndarray
    n_primitives: int
    dtype: type = np.float64

    def blend_records(self, x: int, y: int) -> list[tuple[int, float]]:
        """(primitive id, alpha) pairs composited at pixel (x, y), front first."""
        p = self.projection
        tile = (y // TILE) * _tiles_x(self.rgb.shape[1]) + x // TILE
        out = []
        start = self.tile_offsets[tile]
        for e in range(start, start + self.n_contrib[y, x]):
            k = self.tile_entries[e]
            alpha = _alpha_at(p.uv[k], p.conic[k], p.opacity[k], x, y)
            if alpha >= ALPHA_MIN:
                out.append((int(p.index[k]), alpha))
        return out


@dataclass
class PrimitiveGrads:
    d_mean: np.ndarray  # (n, 3)
    d_log_scale: np.ndarray  # (n, 3)
    d_rotation: np.ndarray  # (n, 4)
    d_raw_opacity: np.ndarray  # (n,)
    d_color: np.ndarray  # (n, 3), w.r.t. RGB

    @property
    def d_sh_dc(self) -> np.ndarray:
        return self.d_color * SH_C0

    def __len__(self) -> int:
        return len(self.d_mean)

    def __getitem__(self, i: int) -> dict:
        return {"d_mean": self.d_mean[i], "d_log_scale": self.d_log_scale[i],
                "d_rotation": self.d_rotation[i], "d_raw_opacity": self.d_raw_opacity[i],
                "d_color": self.d_color[i]}


def _tiles_x(width: int) -> int:
    return (width + TILE - 1) // TILE


def _alpha_at(uv, conic, opacity, x, y) -> float:
    dx, dy = x - uv[0], y - uv[1]
    power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy
    if power > 0.0:
        return 0.0
    return min(ALPHA_MAX, opacity * np.exp(power))


def project_point(camera: Camera, mean) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera-space depth of a world point."""
    t = camera.world_to_camera(mean)
    uv = camera.focal * t[..., :2] / t[..., 2:3] + camera.principal_point
    return uv, t[..., 2]


def projection_jacobian(camera: Camera, cam_points: np.ndarray) -> np.ndarray:
    """Jacobian of the pinhole map w.r.t. camera-space points, shape (..., 2, 3)."""
    fx, fy = camera.focal
    tx, ty, tz = np.moveaxis(np.asarray(cam_points, dtype=np.float64), -1, 0)
    J = np.zeros(np.shape(cam_points)[:-1] + (2, 3))
    J[..., 0, 0] = fx / tz
    J[..., 0, 2] = -fx * tx / tz**2
    J[..., 1, 1] = fy / tz
    J[..., 1, 2] = -fy * ty / tz**2
    return J


def project_covariance(camera: Camera, mean, cov: np.ndarray) -> np.ndarray:
    """EWA screen covariance ``(J W Sigma W^T J^T)`` plus the low-pass floor."""
    J = projection_jacobian(camera, camera.world_to_camera(mean))
    T = J @ camera.rotation
    cov2d = T @ cov @ np.swapaxes(T, -1, -2)
    return cov2d + LOWPASS * np.eye(2)


def project_scene(scene: Scene, camera: Camera) -> Projection:
    t = camera.world_to_camera(scene.means)
    depth = t[:, 2]
    visible = np.flatnonzero(depth > NEAR_PLANE)
    # stable sort: depth ties keep primitive order
    order = visible[np.argsort(depth[visible], kind="stable")]
    t = t[order]
    uv = camera.focal * t[:, :2] / t[:, 2:3] + camera.principal_point
    J = projection_jacobian(camera, t)
    cov3d = build_covariance(scene.log_scales[order], scene.rotations[order])
    T = J @ camera.rotation
    cov2d = T @ cov3d @ np.swapaxes(T, -1, -2) + LOWPASS * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    ok = np.isfinite(det) & (det > 0.0) & np.all(np.isfinite(uv), axis=1)
    if not ok.all():
        order, t, uv, J, cov3d, cov2d, det = (a[ok] for a in (order, t, uv, J, cov3d, cov2d, det))
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    return Projection(order, t, uv, J, cov3d, cov2d, conic,
                      scene.opacities[order], scene.colors[order])


@numba.njit(cache=True)
def _bin_tiles(uv, cov2d, opacity, width, height, tile):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    P = uv.shape[0]
    rects = np.zeros((P, 4), dtype=np.int64)
    counts = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    for k in range(P):
        if opacity[k] * 255.0 < 1.0:
            rects[k, 0] = 0
            rects[k, 1] = -1
            continue
        # beyond this Mahalanobis radius alpha < 1/255, so culling is exact
        r2 = 2.0 * np.log(255.0 * opacity[k])
        hx = np.sqrt(r2 * cov2d[k, 0, 0]) + 1.0
        hy = np.sqrt(r2 * cov2d[k, 1, 1]) + 1.0
        x0 = max(0, int(np.floor((uv[k, 0] - hx) / tile)))
        x1 = min(n_tx - 1, int(np.floor((uv[k, 0] + hx) / tile)))
        y0 = max(0, int(np.floor((uv[k, 1] - hy) / tile)))
        y1 = min(n_ty - 1, int(np.floor((uv[k, 1] + hy) / tile)))
        if uv[k, 0] + hx < 0 or uv[k, 1] + hy < 0 or x0 > x1 or y0 > y1:
            rects[k, 0] = 0
            rects[k, 1] = -1
            continue
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in range(P):
        if rects[k, 1] < rects[k, 0]:
            continue
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                t = ty * n_tx + tx
                entries[fill[t]] = k
                fill[t] += 1
    return offsets, entries


@numba.njit(cache=True, parallel=True)
def _forward_kernel(uv, conic, opacity, color, bg, offsets, entries, width, height, tile):
    n_tx = (width + tile - 1) // tile
    rgb = np.empty((height, width, 3), dtype=uv.dtype)
    trans = np.empty((height, width), dtype=uv.dtype)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    # rows are independent, so the result does not depend on the thread count
    for py in numba.prange(height):
        for px in range(width):
            t_id = (py // tile) * n_tx + px // tile
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            last = 0
            start = offsets[t_id]
            for e in range(start, offsets[t_id + 1]):
                k = entries[e]
                dx = px - uv[k, 0]
                dy = py - uv[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = min(ALPHA_MAX, opacity[k] * np.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                test_T = T * (1.0 - alpha)
                if test_T < T_MIN:
                    break
                w = alpha * T
                c0 += color[k, 0] * w
                c1 += color[k, 1] * w
                c2 += color[k, 2] * w
                T = test_T
                last = e - start + 1
            rgb[py, px, 0] = c0 + T * bg[0]
            rgb[py, px, 1] = c1 + T * bg[1]
            rgb[py, px, 2] = c2 + T * bg[2]
            trans[py, px] = T
            n_contrib[py, px] = last
    return rgb, trans, n_contrib


@numba.njit(cache=True)
def _backward_kernel(uv, conic, opacity, color, bg, offsets, entries, n_contrib,
                     trans, d_rgb, width, height, tile):
    n_tx = (width + tile - 1) // tile
    P = uv.shape[0]
    d_uv = np.zeros((P, 2))
    d_conic = np.zeros((P, 3))
    d_opacity = np.zeros(P)
    d_color = np.zeros((P, 3))
    stack_k = np.empty(entries.shape[0] + 1, dtype=np.int64)
    stack_a = np.empty(entries.shape[0] + 1)
    stack_t = np.empty(entries.shape[0] + 1)
    for py in range(height):
        for px in range(width):
            t_id = (py // tile) * n_tx + px // tile
            start = offsets[t_id]
            g0 = d_rgb[py, px, 0]
            g1 = d_rgb[py, px, 1]
            g2 = d_rgb[py, px, 2]
            # replay the forward pass, recording exact transmittances
            T = 1.0
            m = 0
            for e in range(start, start + n_contrib[py, px]):
                k = entries[e]
                dx = px - uv[k, 0]
                dy = py - uv[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = min(ALPHA_MAX, opacity[k] * np.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                stack_k[m] = k
                stack_a[m] = alpha
                stack_t[m] = T
                m += 1
                T = T * (1.0 - alpha)
            # colour of everything behind the current entry, background included
            r0 = trans[py, px] * bg[0]
            r1 = trans[py, px] * bg[1]
            r2 = trans[py, px] * bg[2]
            for s in range(m - 1, -1, -1):
                k = stack_k[s]
                alpha = stack_a[s]
                Ti = stack_t[s]
                w = alpha * Ti
                d_color[k, 0] += w * g0
                d_color[k, 1] += w * g1
                d_color[k, 2] += w * g2
                inv = 1.0 / (1.0 - alpha)
                d_alpha = ((color[k, 0] * Ti - r0 * inv) * g0
                           + (color[k, 1] * Ti - r1 * inv) * g1
                           + (color[k, 2] * Ti - r2 * inv) * g2)
                r0 += color[k, 0] * w
                r1 += color[k, 1] * w
                r2 += color[k, 2] * w
                dx = px - uv[k, 0]
                dy = py - uv[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                g = np.exp(power)
                if opacity[k] * g > ALPHA_MAX:
                    continue  # clamped: alpha is locally constant
                d_opacity[k] += g * d_alpha
                d_power = opacity[k] * g * d_alpha
                d_uv[k, 0] += d_power * (conic[k, 0] * dx + conic[k, 1] * dy)
                d_uv[k, 1] += d_power * (conic[k, 1] * dx + conic[k, 2] * dy)
                d_conic[k, 0] += -0.5 * dx * dx * d_power
                d_conic[k, 1] += -dx * dy * d_power
                d_conic[k, 2] += -0.5 * dy * dy * d_power
    return d_uv, d_conic, d_opacity, d_color


def render(scene: Scene, camera: Camera, background=(0.0, 0.0, 0.0), dtype=np.float64) -> RenderOutput:
    """Composite ``scene`` front to back as seen from ``camera``.

    ``dtype=np.float32`` runs the compositing kernels in single precision.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project_scene(scene, camera)
    width, height = camera.resolution
    offsets, entries = _bin_tiles(proj.uv, proj.cov2d, proj.opacity, width, height, TILE)
    cast = lambda a: np.ascontiguousarray(a, dtype=dtype)
    rgb, trans, n_contrib = _forward_kernel(
        cast(proj.uv.reshape(-1, 2)), cast(proj.conic.reshape(-1, 3)), cast(proj.opacity),
        cast(proj.color.reshape(-1, 3)), cast(bg), offsets, entries, width, height, TILE)
    return RenderOutput(rgb.astype(np.float64), trans.astype(np.float64), n_contrib,
                        offsets, entries, proj, bg, len(scene), dtype)


def _dquat_from_drot(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a rotation-matrix cotangent back to the unnormalized quaternion."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / norm).T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    qn = q / norm
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def backward(scene: Scene, camera: Camera, out: RenderOutput, d_loss_d_rgb: np.ndarray) -> PrimitiveGrads:
    """Gradients of ``sum(d_loss_d_rgb * rgb)`` w.r.t. every primitive parameter."""
    d_rgb = np.asarray(d_loss_d_rgb, dtype=np.float64)
    if d_rgb.shape != out.rgb.shape:
        raise ValueError(f"cotangent shape {d_rgb.shape} does not match image {out.rgb.shape}")
    if out.n_primitives != len(scene):
        raise ValueError("render output was produced from a different scene")
    n = len(scene)
    grads = PrimitiveGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                           np.zeros(n), np.zeros((n, 3)))
    p = out.projection
    if len(p.index) == 0:
        return grads
    width, height = camera.resolution
    cast = lambda a: np.ascontiguousarray(a, dtype=out.dtype)
    d_uv, d_conic, d_op, d_col = _backward_kernel(
        cast(p.uv), cast(p.conic), cast(p.opacity), cast(p.color), cast(out.background),
        out.tile_offsets, out.tile_entries, out.n_contrib, cast(out.final_transmittance),
        cast(d_rgb), width, height, TILE)

    # conic -> 2D covariance: d(inv A) = -inv(A) dA inv(A)
    K = np.empty((len(p.index), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = p.conic[:, 0], p.conic[:, 1], p.conic[:, 1], p.conic[:, 2]
    Gc = np.empty_like(K)
    Gc[:, 0, 0], Gc[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * d_conic[:, 1]
    G2 = -K @ Gc @ K

    W = camera.rotation
    T = p.jacobian @ W
    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    dT = 2.0 * G2 @ T @ p.cov3d
    dJ = dT @ W.T

    fx, fy = camera.focal
    tx, ty, tz = p.cam_points.T
    dt = np.zeros((len(p.index), 3))
    dt[:, 0] = -fx / tz**2 * dJ[:, 0, 2]
    dt[:, 1] = -fy / tz**2 * dJ[:, 1, 2]
    dt[:, 2] = (-fx / tz**2 * dJ[:, 0, 0] + 2 * fx * tx / tz**3 * dJ[:, 0, 2]
                - fy / tz**2 * dJ[:, 1, 1] + 2 * fy * ty / tz**3 * dJ[:, 1, 2])
    dt[:, 0] += fx / tz * d_uv[:, 0]
    dt[:, 1] += fy / tz * d_uv[:, 1]
    dt[:, 2] += -fx * tx / tz**2 * d_uv[:, 0] - fy * ty / tz**2 * d_uv[:, 1]

    rows = p.index
    q = scene.rotations[rows]
    R = quat_to_rotmat(q)
    s = np.exp(scene.log_scales[rows])
    M = R * s[:, None, :]
    dM = 2.0 * G3 @ M
    ds = np.sum(dM * R, axis=1)

    grads.d_mean[rows] = dt @ W
    grads.d_log_scale[rows] = ds * s
    grads.d_rotation[rows] = _dquat_from_drot(q, dM * s[:, None, :])
    grads.d_raw_opacity[rows] = d_op * p.opacity * (1.0 - p.opacity)
    grads.d_color[rows] = d_col
    return grads
