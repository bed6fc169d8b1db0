"""Domain types shared by every stage: Gaussians, scenes, cameras, feature maps
and per-Gaussian semantic fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

GRANULARITIES = (1, 2, 3)
GRANULARITY_NAMES = {1: "whole", 2: "part", 3: "subpart"}

# Minimum accumulated weight for a lifted feature to count as observed.
TAU_MASS = 1e-6


def check_granularity(g: int) -> int:
    if int(g) != g or int(g) not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {g!r}")
    return int(g)


def quat_to_rotmat(quat: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The input is normalized first, so q and -q give the same matrix.
    """
    q = np.asarray(quat, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
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


def covariances(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Batched R diag(scale^2) R^T for (N, 4) quats and (N, 3) scales."""
    R = quat_to_rotmat(quat)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    opacity: float
    rgb: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(3))
        object.__setattr__(self, "quat", np.asarray(self.quat, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))


def covariance_of(g: Gaussian) -> np.ndarray:
    return covariances(g.quat[None], g.scale[None])[0]


class GaussianScene:
    """An ordered set of Gaussians stored column-wise.

    Row ``i`` of every array is Gaussian ``i``; that index is used by every
    downstream per-Gaussian array (features, variances, weights, labels).
    """

    def __init__(self, mu, quat, scale, opacity, rgb, bbox=None):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.quat = np.asarray(quat, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(scale, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(opacity, dtype=np.float64).reshape(n)
        self.rgb = np.asarray(rgb, dtype=np.float64).reshape(n, 3)
        if bbox is None:
            if n:
                bbox = (self.mu.min(axis=0), self.mu.max(axis=0))
            else:
                bbox = (np.zeros(3), np.zeros(3))
        self.bbox = (np.asarray(bbox[0], dtype=np.float64).reshape(3),
                     np.asarray(bbox[1], dtype=np.float64).reshape(3))
        for arr in (self.mu, self.quat, self.scale, self.opacity, self.rgb, *self.bbox):
            arr.setflags(write=False)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], bbox=None) -> "GaussianScene":
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                       np.zeros(0), np.zeros((0, 3)), bbox)
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.quat for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.rgb for g in gaussians]),
            bbox,
        )

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.quat[i], self.scale[i], self.opacity[i], self.rgb[i])

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    @property
    def gaussians(self) -> List[Gaussian]:
        return list(self)

    def covariances(self) -> np.ndarray:
        return covariances(self.quat, self.scale)

    def subset(self, index) -> "GaussianScene":
        index = np.asarray(index)
        return GaussianScene(self.mu[index], self.quat[index], self.scale[index],
                             self.opacity[index], self.rgb[index], self.bbox)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianScene):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(
            (self.mu, self.quat, self.scale, self.opacity, self.rgb, *self.bbox),
            (other.mu, other.quat, other.scale, other.opacity, other.rgb, *other.bbox)))


@dataclass(frozen=True)
class Violation:
    index: int
    invariant: str
    detail: str = ""

    def __str__(self):
        where = "scene" if self.index < 0 else f"gaussian {self.index}"
        return f"{where}: {self.invariant}" + (f" ({self.detail})" if self.detail else "")


def validate_scene(scene: GaussianScene) -> List[Violation]:
    """Report every violated invariant; an empty list means the scene is valid."""
    out: List[Violation] = []
    qn = np.linalg.norm(scene.quat, axis=1)
    lo, hi = scene.bbox
    for i in range(len(scene)):
        if not (np.all(np.isfinite(scene.mu[i])) and np.all(np.isfinite(scene.quat[i]))
                and np.all(np.isfinite(scene.scale[i])) and np.isfinite(scene.opacity[i])
                and np.all(np.isfinite(scene.rgb[i]))):
            out.append(Violation(i, "finite values"))
            continue
        if abs(qn[i] - 1.0) > 1e-6:
            out.append(Violation(i, "quaternion norm", f"|q|={qn[i]:.6g}"))
        if np.any(scene.scale[i] <= 0):
            out.append(Violation(i, "scale positive", str(scene.scale[i].tolist())))
        if not 0.0 <= scene.opacity[i] <= 1.0:
            out.append(Violation(i, "opacity range", f"{scene.opacity[i]:.6g}"))
        if np.any(scene.rgb[i] < 0) or np.any(scene.rgb[i] > 1):
            out.append(Violation(i, "rgb range", str(scene.rgb[i].tolist())))
        if np.any(scene.mu[i] < lo) or np.any(scene.mu[i] > hi):
            out.append(Violation(i, "bbox containment"))
    return out


def require_valid(scene: GaussianScene) -> None:
    problems = validate_scene(scene)
    if problems:
        shown = "; ".join(str(p) for p in problems[:5])
        raise ValueError(f"invalid scene ({len(problems)} violations): {shown}")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera space,
    x_cam = rotation @ x_world + translation, with +z pointing forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    znear: float = 0.01

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.znear > 0:
            raise ValueError("znear must be positive")
        if (np.abs(R @ R.T - np.eye(3)).max() > 1e-6
                or abs(np.linalg.det(R) - 1.0) > 1e-6):
            raise ValueError("world_to_cam rotation is not a rotation matrix")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, znear=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, R, -R @ eye, znear)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class FeatureMap:
    view_id: int
    granularity: int
    data: np.ndarray

    def __post_init__(self):
        check_granularity(self.granularity)
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"feature map must be H x W x D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"feature map for view {self.view_id} has non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view_id", int(self.view_id))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def matches(self, cam: Camera) -> bool:
        return self.height == cam.height and self.width == cam.width


@dataclass
class SemanticField:
    granularity: int
    features: np.ndarray
    variance: np.ndarray
    weight_mass: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        check_granularity(self.granularity)
        self.features = np.asarray(self.features, dtype=np.float64)
        n, d = self.features.shape
        self.variance = np.asarray(self.variance, dtype=np.float64).reshape(n, d)
        self.weight_mass = np.asarray(self.weight_mass, dtype=np.float64).reshape(n)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(n)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check(self, n_gaussians: Optional[int] = None) -> List[str]:
        """Invariant check returning human-readable problems."""
        problems = []
        if n_gaussians is not None and len(self) != n_gaussians:
            problems.append(f"row count {len(self)} != scene size {n_gaussians}")
        if np.any(self.variance < 0):
            problems.append("negative variance")
        if np.any(self.weight_mass < 0):
            problems.append("negative weight mass")
        inv = ~self.valid
        if np.any(self.features[inv] != 0) or np.any(self.variance[inv] != 0):
            problems.append("invalid rows carry nonzero values")
        return problems
