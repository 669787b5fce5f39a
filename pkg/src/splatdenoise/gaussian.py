"""Gaussian primitives, scenes and cameras.

Parameters are stored unconstrained: log-scales, logit opacities and
unnormalized (w, x, y, z) quaternions. Colors are kept as degree-0 spherical
harmonic coefficients so that the splat PLY layout round-trips exactly;
``Scene.colors`` exposes them as RGB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SH_C0 = 0.28209479177387814


class InvalidParameterError(ValueError):
    """Raised when a parameter cannot describe a valid primitive or camera."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh):
    return np.asarray(sh, dtype=np.float64) * SH_C0 + 0.5


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion must have finite non-zero norm")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; batches over leading axes.

    The quaternion is normalized first, so any non-zero scaling of ``q`` (and
    its negation) yields the same matrix.
    """
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(np.shape(q)[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Covariance ``R S S^T R^T`` with ``S = diag(exp(log_scale))``.

    Both arguments may carry matching leading batch dimensions.
    """
    R = quat_to_rotmat(rotation)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    # exact symmetry, independent of matmul summation order
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    raw_opacity: float
    color: np.ndarray

    def __post_init__(self):
        for name, size in (("mean", 3), ("log_scale", 3), ("rotation", 4), ("color", 3)):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (size,):
                raise InvalidParameterError(f"{name} must have {size} components")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "raw_opacity", float(self.raw_opacity))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.log_scale, self.rotation)


def evaluate_density(primitive: GaussianPrimitive, x) -> float:
    """Unnormalized density ``exp(-0.5 d^T Sigma^-1 d)`` with ``d = x - mean``.

    Uses the eigen-frame of the primitive so no explicit inverse is formed.
    """
    d = np.asarray(x, dtype=np.float64) - primitive.mean
    local = primitive.rotmat.T @ d / primitive.scale
    return float(np.exp(-0.5 * np.dot(local, local)))


@dataclass
class Scene:
    """Ordered struct-of-arrays collection of primitives.

    ``stream_ids`` assigns each primitive its own random stream; new
    primitives created by relocation or splitting get fresh ids from
    ``next_stream_id`` so noise draws never depend on processing order.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    sh_dc: np.ndarray
    rng_seed: int = 0
    stream_ids: np.ndarray | None = None
    next_stream_id: int = field(default=-1)

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        self.raw_opacities = np.array(self.raw_opacities, dtype=np.float64).reshape(n)
        self.sh_dc = np.array(self.sh_dc, dtype=np.float64).reshape(n, 3)
        if self.stream_ids is None:
            self.stream_ids = np.arange(n, dtype=np.int64)
        self.stream_ids = np.array(self.stream_ids, dtype=np.int64).reshape(n)
        if self.next_stream_id < 0:
            self.next_stream_id = int(self.stream_ids.max()) + 1 if n else 0
        self.rng_seed = int(self.rng_seed)

    @classmethod
    def empty(cls, rng_seed: int = 0) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)), rng_seed=rng_seed)

    @classmethod
    def from_primitives(cls, primitives, rng_seed: int = 0) -> "Scene":
        primitives = list(primitives)
        if not primitives:
            return cls.empty(rng_seed)
        return cls(
            means=np.stack([p.mean for p in primitives]),
            log_scales=np.stack([p.log_scale for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            raw_opacities=np.array([p.raw_opacity for p in primitives]),
            sh_dc=rgb_to_sh(np.stack([p.color for p in primitives])),
            rng_seed=rng_seed,
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.log_scales[i], self.rotations[i],
                                 self.raw_opacities[i], sh_to_rgb(self.sh_dc[i]))

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    @property
    def colors(self) -> np.ndarray:
        return sh_to_rgb(self.sh_dc)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.log_scales, self.rotations)

    def copy(self) -> "Scene":
        return Scene(self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
                     self.raw_opacities.copy(), self.sh_dc.copy(), self.rng_seed,
                     self.stream_ids.copy(), self.next_stream_id)

    def subset(self, index) -> "Scene":
        """New scene holding the rows selected by ``index`` (mask or indices)."""
        return Scene(self.means[index], self.log_scales[index], self.rotations[index],
                     self.raw_opacities[index], self.sh_dc[index], self.rng_seed,
                     self.stream_ids[index], self.next_stream_id)

    def append(self, other: "Scene", fresh_streams: bool = True) -> None:
        n_new = len(other)
        self.means = np.concatenate([self.means, other.means])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.rotations = np.concatenate([self.rotations, other.rotations])
        self.raw_opacities = np.concatenate([self.raw_opacities, other.raw_opacities])
        self.sh_dc = np.concatenate([self.sh_dc, other.sh_dc])
        ids = self.allocate_streams(n_new) if fresh_streams else other.stream_ids
        self.stream_ids = np.concatenate([self.stream_ids, ids])

    def allocate_streams(self, count: int) -> np.ndarray:
        ids = np.arange(self.next_stream_id, self.next_stream_id + count, dtype=np.int64)
        self.next_stream_id += count
        return ids

    def equals(self, other: "Scene") -> bool:
        """Bitwise equality of every parameter array."""
        return (len(self) == len(other)
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("means", "log_scales", "rotations", "raw_opacities",
                                  "sh_dc", "stream_ids")))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera space.

    Camera space looks down +z with +x right and +y down the image.
    ``resolution`` is ``(width, height)``.
    """

    focal: np.ndarray
    principal_point: np.ndarray
    resolution: tuple[int, int]
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        W = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.any(focal <= 0):
            raise InvalidParameterError("focal lengths must be positive")
        if np.abs(W.T @ W - np.eye(3)).max() > 1e-9 or np.linalg.det(W) <= 0:
            raise InvalidParameterError("camera rotation must be a proper orthonormal matrix")
        width, height = (int(v) for v in self.resolution)
        if width <= 0 or height <= 0:
            raise InvalidParameterError("resolution must be positive")
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation", W)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "resolution", (width, height))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, focal, resolution, principal_point=None) -> "Camera":
        """Camera at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        W = np.stack([right, down, forward])
        if principal_point is None:
            principal_point = (resolution[0] / 2.0, resolution[1] / 2.0)
        focal = np.broadcast_to(np.asarray(focal, dtype=np.float64), (2,))
        return cls(focal, principal_point, tuple(resolution), W, -W @ eye)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal.tolist(),
            "principal_point": self.principal_point.tolist(),
            "resolution": list(self.resolution),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["focal"], d["principal_point"], tuple(d["resolution"]),
                   d["rotation"], d["translation"])
