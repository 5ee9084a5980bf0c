"""Oriented cuboids, axis-aligned extents and the min-max overlap volume.

Everything here works on plain numpy arrays. The batched helpers
(``aabb_arrays``, ``overlap_arrays``, ...) broadcast over leading axes and are
what the cost functions use; the small dataclasses are the readable front end.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Gray-code corner order: x flips fastest, then y, then z.
CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [-1, +1, -1],
        [+1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [-1, +1, +1],
        [+1, +1, +1],
    ],
    dtype=float,
)

EXPANSION_RATIO = 0.25  # type1/type2: thin axes raised to this fraction of the longest
EXPANSION_DELTA = 0.1  # type3: absolute widening of the thinnest axis (m)


def rot_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=float)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rpy_matrix(rpy) -> np.ndarray:
    """Roll-pitch-yaw (fixed x, y, z axes) to a rotation matrix."""
    r, p, y = rpy
    return rot_axis((0, 0, 1), y) @ rot_axis((0, 1, 0), p) @ rot_axis((1, 0, 0), r)


def matrix_rpy(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rpy_matrix` (pitch kept in [-pi/2, pi/2])."""
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) > 1e-9:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    else:
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    return np.array([roll, pitch, yaw])


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_xyz_rpy(cls, xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rpy_matrix(rpy), xyz)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Cuboid:
    pose: Pose
    half_extents: np.ndarray

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(he > 0):
            raise ValueError(f"half_extents must be strictly positive, got {he}")
        object.__setattr__(self, "half_extents", he)


@dataclass(frozen=True)
class Extents:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


class Expansion(str, Enum):
    NONE = "none"
    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE3 = "type3"


def vertices(c: Cuboid) -> np.ndarray:
    """The 8 world-frame corners, shape (8, 3), in ``CORNER_SIGNS`` order."""
    return c.pose.apply(CORNER_SIGNS * c.half_extents)


def extents(vs) -> Extents:
    vs = np.asarray(vs, dtype=float)
    return Extents(vs.min(axis=0), vs.max(axis=0))


def overlap_volume(a: Extents, b: Extents) -> float:
    return float(overlap_arrays(a.lo, a.hi, b.lo, b.hi))


def swept_extents(a: Extents, b: Extents) -> Extents:
    return Extents(np.minimum(a.lo, b.lo), np.maximum(a.hi, b.hi))


def expand_half_extents(he, expansion, t: int = 1, T: int = 1) -> np.ndarray:
    """Apply an obstacle expansion policy to half extents (no clearance)."""
    he = np.array(he, dtype=float)
    expansion = Expansion(expansion)
    if expansion is Expansion.NONE:
        return he
    if expansion is Expansion.TYPE3:
        i = int(np.argmin(he))
        he[i] += EXPANSION_DELTA
        return he
    floor = EXPANSION_RATIO * he.max()
    gap = np.maximum(floor - he, 0.0)
    scale = 1.0 if expansion is Expansion.TYPE1 else t / T
    return he + scale * gap


def inflate(c: Cuboid, clearance: float = 0.0, expansion=Expansion.NONE, t: int = 1, T: int = 1) -> Cuboid:
    if clearance < 0:
        raise ValueError("clearance must be non-negative")
    he = expand_half_extents(c.half_extents + clearance, expansion, t, T)
    return Cuboid(c.pose, he)


def aabb_arrays(R: np.ndarray, p: np.ndarray, he: np.ndarray):
    """Axis-aligned extents of oriented boxes.

    ``R`` is (..., 3, 3), ``p`` (..., 3) and ``he`` broadcastable to (..., 3).
    The min/max over the 8 corners equals ``p -/+ |R| @ he``.
    """
    r = np.einsum("...ij,...j->...i", np.abs(R), he)
    return p - r, p + r


def overlap_arrays(alo, ahi, blo, bhi):
    """Clamped min-max overlap volume, broadcasting over leading axes."""
    d = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    return np.prod(np.maximum(d, 0.0), axis=-1)


def overlap_grad_arrays(alo, ahi, blo, bhi):
    """Overlap volume and its gradient w.r.t. the first box's lo/hi.

    Returns ``(V, dV/dalo, dV/dahi)``. On the clamped side of any axis the
    gradient is zero. Ties between equal faces route the derivative to the
    first box.
    """
    d = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    pos = d > 0
    dc = np.where(pos, d, 0.0)
    V = np.prod(dc, axis=-1)
    # product of the other two axes
    others = np.stack(
        [dc[..., 1] * dc[..., 2], dc[..., 0] * dc[..., 2], dc[..., 0] * dc[..., 1]], axis=-1
    )
    live = np.all(pos, axis=-1, keepdims=True)
    dVdd = np.where(live, others, 0.0)
    g_hi = np.where(ahi <= bhi, dVdd, 0.0)
    g_lo = np.where(alo >= blo, -dVdd, 0.0)
    return V, g_lo, g_hi


def overlap_vertex_grad(va, vb):
    """Overlap of two vertex sets and the gradient w.r.t. all their coordinates.

    ``va`` and ``vb`` are (8, 3). Returns ``(V, dV/dva, dV/dvb)``; each
    extent's derivative lands on the vertex that attains it.
    """
    va = np.asarray(va, dtype=float)
    vb = np.asarray(vb, dtype=float)
    alo, ahi = va.min(0), va.max(0)
    blo, bhi = vb.min(0), vb.max(0)
    V, ga_lo, ga_hi = overlap_grad_arrays(alo, ahi, blo, bhi)
    _, gb_lo, gb_hi = overlap_grad_arrays(blo, bhi, alo, ahi)
    # overlap_grad_arrays resolves ties towards its first argument, so on a
    # tie both calls would claim the face; drop b's share there
    gb_hi = np.where(ahi == bhi, 0.0, gb_hi)
    gb_lo = np.where(alo == blo, 0.0, gb_lo)
    ga = np.zeros_like(va)
    gb = np.zeros_like(vb)
    ax = np.arange(3)
    ga[va.argmin(0), ax] += ga_lo
    ga[va.argmax(0), ax] += ga_hi
    gb[vb.argmin(0), ax] += gb_lo
    gb[vb.argmax(0), ax] += gb_hi
    return V, ga, gb


def swept_grad_arrays(lo0, hi0, lo1, hi1, g_lo, g_hi):
    """Pull a gradient on swept extents back onto the two source boxes."""
    first_lo = lo0 <= lo1
    first_hi = hi0 >= hi1
    return (
        np.where(first_lo, g_lo, 0.0),
        np.where(first_hi, g_hi, 0.0),
        np.where(first_lo, 0.0, g_lo),
        np.where(first_hi, 0.0, g_hi),
    )
