"""Geometry and parameter primitives: cameras, Gaussians and activations.

Conventions used across the package:

* quaternions are stored ``(w, x, y, z)``;
* a pose's rotation maps world to camera, ``x_cam = R @ (p - center)``;
* camera space is right handed with +z forward, +x right, +y down;
* pixel ``(i, j)`` has its center at image coordinates ``(i, j)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; normalizes first."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
    q = np.roll(xyzw, 1, axis=-1)
    # canonical sign: w >= 0
    return np.where(q[..., :1] < 0, -q, q)


def quat_nlerp_midpoint(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Normalized midpoint of two rotations, aligned to one hemisphere."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    if np.dot(q0, q1) < 0:
        q1 = -q1
    return quat_normalize(0.5 * (q0 + q1))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray  # unit quaternion (w, x, y, z), world -> camera
    center: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            # accept near-unit input from text files, store exactly normalized
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"pose rotation is not a unit quaternion (norm {n})")
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @property
    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @classmethod
    def look_at(cls, center, target, down=(0.0, -1.0, 0.0)) -> "CameraPose":
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd /= np.linalg.norm(fwd)
        right = np.cross(np.asarray(down, dtype=np.float64), fwd)
        right /= np.linalg.norm(right)
        dn = np.cross(fwd, right)
        rot = np.stack([right, dn, fwd])
        return cls(rotation=rotmat_to_quat(rot), center=center)


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    name: str = ""

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def to_json(self) -> dict:
        k = self.intrinsics
        return {
            "name": self.name,
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "rotation": [float(v) for v in self.pose.rotation],
            "center": [float(v) for v in self.pose.center],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        k = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]))
        return cls(k, CameraPose(np.array(d["rotation"], float), np.array(d["center"], float)),
                   d.get("name", ""))


def world_to_camera(point, pose: CameraPose) -> np.ndarray:
    """Camera-space coordinates of one or many (..., 3) world points."""
    p = np.asarray(point, dtype=np.float64)
    return (p - pose.center) @ pose.rotmat.T


def covariance_from_scale_rotation(raw_scale, rotation_q) -> np.ndarray:
    """World covariance ``R S S^T R^T`` with ``S = diag(exp(raw_scale))``.

    Works on single parameters or stacked (N, 3) / (N, 4) arrays.
    """
    s = np.exp(np.asarray(raw_scale, dtype=np.float64))
    m = quat_to_rotmat(rotation_q) * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def camera_bbox(centers: Iterable) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around camera centers (poses or raw 3-vectors)."""
    pts = [c.center if isinstance(c, CameraPose) else
           c.pose.center if isinstance(c, Camera) else np.asarray(c, float)
           for c in centers]
    if not pts:
        raise ValueError("no cameras")
    pts = np.stack(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    margin = np.maximum(1e-3 * (hi - lo), 1e-6)
    return lo - margin, hi + margin


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    raw_opacity: float
    raw_scale: np.ndarray
    rotation_q: np.ndarray
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.raw_scale, dtype=np.float64))


FIELDS = ("mu", "raw_opacity", "raw_scale", "rotation_q", "color")
FIELD_WIDTH = {"mu": 3, "raw_opacity": 1, "raw_scale": 3, "rotation_q": 4, "color": 3}


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for N Gaussians (raw parameters)."""

    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    raw_opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    raw_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotation_q: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.raw_opacity = np.asarray(self.raw_opacity, dtype=np.float64).reshape(-1)
        self.raw_scale = np.asarray(self.raw_scale, dtype=np.float64).reshape(-1, 3)
        self.rotation_q = np.asarray(self.rotation_q, dtype=np.float64).reshape(-1, 4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        if any(len(getattr(self, f)) != n for f in FIELDS):
            raise ValueError("field lengths disagree")

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.raw_scale)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f: getattr(self, f).copy() for f in FIELDS})

    def take(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{f: getattr(self, f)[idx] for f in FIELDS})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(**{f: np.concatenate([getattr(self, f), getattr(other, f)])
                                for f in FIELDS})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in FIELDS)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i].copy(), float(self.raw_opacity[i]), self.raw_scale[i].copy(),
                        self.rotation_q[i].copy(), self.color[i].copy())

    @classmethod
    def from_gaussians(cls, gs: Sequence[Gaussian]) -> "GaussianCloud":
        if not gs:
            return cls()
        return cls(mu=[g.mu for g in gs], raw_opacity=[g.raw_opacity for g in gs],
                   raw_scale=[g.raw_scale for g in gs], rotation_q=[g.rotation_q for g in gs],
                   color=[g.color for g in gs])

    def to_gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    def flat(self) -> np.ndarray:
        """Concatenated per-Gaussian parameter rows (N, 14) in FIELDS order."""
        return np.concatenate([getattr(self, f).reshape(len(self), -1) for f in FIELDS], axis=1)

    @classmethod
    def from_flat(cls, arr: np.ndarray) -> "GaussianCloud":
        out, at = {}, 0
        for f in FIELDS:
            w = FIELD_WIDTH[f]
            out[f] = arr[:, at:at + w].reshape(-1) if w == 1 else arr[:, at:at + w]
            at += w
        return cls(**out)


def scene_extent(cameras: Sequence[Camera]) -> float:
    """1.1 x the largest camera distance from the mean center (min 1e-3)."""
    c = np.stack([cam.pose.center for cam in cameras])
    radius = np.linalg.norm(c - c.mean(axis=0), axis=1).max()
    return float(max(1.1 * radius, 1e-3))


__all__ = [
    "Camera", "CameraIntrinsics", "CameraPose", "Gaussian", "GaussianCloud", "FIELDS",
    "camera_bbox", "covariance_from_scale_rotation", "logit", "quat_normalize",
    "quat_nlerp_midpoint", "quat_to_rotmat", "rotmat_to_quat", "scene_extent", "sigmoid",
    "world_to_camera",
]
