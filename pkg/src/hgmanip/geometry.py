"""Point clouds, unit-quaternion rotations and small sampling utilities.

Everything here is float64 numpy and immutable after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import HGMError

ANTIPARALLEL_EPS = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """N ordered 3D points plus optional named per-point payloads.

    Payloads hold features (N x D float), descriptors, integer labels, or any
    other per-point array; each must have leading dimension N.
    """

    points: np.ndarray
    payloads: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise HGMError("bad-cloud", f"points must be (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise HGMError("bad-cloud", "non-finite coordinates")
        n = pts.shape[0]
        frozen = {}
        for name, arr in self.payloads.items():
            arr = np.asarray(arr)
            if arr.shape[:1] != (n,):
                raise HGMError("bad-cloud", f"payload {name!r} has {arr.shape[:1]} rows, expected {n}")
            frozen[name] = _frozen(arr)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "payloads", MappingProxyType(frozen))

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, dict(self.payloads))

    def with_payload(self, name: str, values: np.ndarray) -> "PointCloud":
        payloads = dict(self.payloads)
        payloads[name] = values
        return PointCloud(self.points, payloads)

    def select(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.points[idx], {k: v[idx] for k, v in self.payloads.items()})


@dataclass(frozen=True)
class Rotation3:
    """Unit quaternion ``(w, x, y, z)``; normalised on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise HGMError("bad-rotation", "quaternion norm is zero or non-finite")
        q = q / n
        # canonical hemisphere keeps serialised poses stable
        if q[0] < 0:
            q = -q
        for name, val in zip("wxyz", q):
            object.__setattr__(self, name, float(val))

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Rotation3":
        q = np.asarray(q, dtype=np.float64)
        return cls(*q)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation3":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        s = np.sin(angle / 2.0)
        return cls(np.cos(angle / 2.0), *(s * axis))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def __mul__(self, other: "Rotation3") -> "Rotation3":
        """Hamilton product: ``(a * b).apply(p) == a.apply(b.apply(p))``."""
        a, b = self.as_array(), other.as_array()
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return Rotation3(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def inverse(self) -> "Rotation3":
        return Rotation3(self.w, -self.x, -self.y, -self.z)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Rotate a single 3-vector or an (N, 3) array."""
        return np.asarray(p, dtype=np.float64) @ self.matrix().T

    def angle_to(self, other: "Rotation3") -> float:
        """Geodesic angle in radians between two rotations."""
        d = abs(float(np.dot(self.as_array(), other.as_array())))
        return 2.0 * float(np.arccos(min(1.0, d)))


@dataclass(frozen=True)
class GraspPose:
    position: np.ndarray
    orientation: Rotation3 = field(default_factory=Rotation3.identity)
    gripper: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise HGMError("bad-pose", "non-finite position")
        if not 0.0 <= self.gripper <= 1.0:
            raise HGMError("bad-pose", f"gripper {self.gripper} outside [0, 1]")
        object.__setattr__(self, "position", _frozen(pos))

    def to_json(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "orientation": [float(v) for v in self.orientation.as_array()],
            "gripper": float(self.gripper),
        }


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is all zeros."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise HGMError("dim-mismatch", f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_similarity_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity, (N, D) x (K, D) -> (N, K). Zero rows give 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise HGMError("dim-mismatch", f"{A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    na = np.where(na == 0.0, np.inf, na)
    nb = np.where(nb == 0.0, np.inf, nb)
    return np.clip((A / na) @ (B / nb).T, -1.0, 1.0)


def rotation_between(u, v) -> Rotation3:
    """Shortest-arc rotation taking direction ``u`` onto direction ``v``.

    For antiparallel inputs the 180 degree axis is ``u x e_i`` where ``e_i`` is the
    coordinate axis least aligned with ``u`` (lowest index on ties).
    """
    u = np.asarray(u, dtype=np.float64).reshape(3)
    v = np.asarray(v, dtype=np.float64).reshape(3)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 1e-9 or nv <= 1e-9:
        raise HGMError("degenerate-vector", f"|u|={nu:.3g}, |v|={nv:.3g}")
    u, v = u / nu, v / nv
    d = float(np.dot(u, v))
    if d < -1.0 + ANTIPARALLEL_EPS:
        i = int(np.argmin(np.abs(u)))
        axis = np.cross(u, np.eye(3)[i])
        return Rotation3.from_axis_angle(axis, np.pi)
    c = np.cross(u, v)
    return Rotation3(1.0 + d, *c)


def apply_transform(cloud: PointCloud, rotation: Rotation3, translation) -> PointCloud:
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    return cloud.with_points(rotation.apply(cloud.points) + t)


def fps_indices(points: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Farthest-point sampling indices; the first index is a seeded uniform draw."""
    n = points.shape[0]
    if m < 1:
        raise HGMError("bad-argument", "m must be >= 1")
    if m >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for i in range(1, m):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.sum((points - points[chosen[i]]) ** 2, axis=1))
    return chosen


def fps_downsample(cloud: PointCloud, m: int, seed: int) -> PointCloud:
    if m >= len(cloud):
        return cloud
    return cloud.select(fps_indices(cloud.points, m, seed))


def nearest_index(cloud: PointCloud, query) -> int:
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d = np.sum((cloud.points - q) ** 2, axis=1)
    # argmin returns the first minimum, i.e. lowest index on ties
    return int(np.argmin(d))
