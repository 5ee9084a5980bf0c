"""Revolute kinematic chains with one cuboid per link.

Joint frames compose as ``F_k = F_{k-1} @ origin_k @ Rot(axis_k, q_k)``; a link's
box sits at ``F_{joint(link)} @ offset``. The batched routine :func:`fk_arrays`
returns everything the cost gradients need (link rotations/positions plus world
joint axes and pivots), so the Jacobian of any link point is
``d x / d q_j = axis_j x (x - pivot_j)`` for joints upstream of the link.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import CORNER_SIGNS, Cuboid, Pose, aabb_arrays, matrix_rpy, overlap_arrays, rpy_matrix

CHAIN_FORMAT = "diffplan.chain/1"


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin: Pose = field(default_factory=Pose)
    limits: tuple[float, float] = (-np.pi, np.pi)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if not abs(n - 1.0) < 1e-9:
            raise ValueError(f"joint axis must be unit norm, got |axis|={n}")
        lo, hi = (float(v) for v in self.limits)
        if not lo < hi:
            raise ValueError(f"joint limits must satisfy lo < hi, got {self.limits}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "limits", (lo, hi))


@dataclass(frozen=True)
class Link:
    joint: int
    half_extents: np.ndarray
    offset: Pose = field(default_factory=Pose)

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(he > 0):
            raise ValueError(f"link half_extents must be positive, got {he}")
        object.__setattr__(self, "half_extents", he)


@dataclass(frozen=True)
class Attachment:
    half_extents: np.ndarray
    offset: Pose = field(default_factory=Pose)

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(he > 0):
            raise ValueError(f"attachment half_extents must be positive, got {he}")
        object.__setattr__(self, "half_extents", he)


@dataclass(frozen=True)
class ChainSpec:
    joints: tuple[Joint, ...]
    links: tuple[Link, ...]
    attached: Attachment | None = None
    name: str = "chain"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.joints) < 1:
            raise ValueError("a chain needs at least one joint")
        if len(self.links) < len(self.joints):
            raise ValueError("need at least one link per joint")
        for i, link in enumerate(self.links):
            if not 0 <= link.joint < len(self.joints):
                raise ValueError(f"links[{i}] bound to missing joint {link.joint}")

    @property
    def m(self) -> int:
        return len(self.joints)

    @property
    def n_boxes(self) -> int:
        return len(self.links) + (self.attached is not None)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def box_table(self):
        """Per-box (joint index, offset rotation, offset translation, half extents).

        The attached object, if any, is the last row and rides on the last link.
        """
        joints = [lk.joint for lk in self.links]
        offsets = [lk.offset for lk in self.links]
        he = [lk.half_extents for lk in self.links]
        if self.attached is not None:
            last = self.links[-1]
            joints.append(last.joint)
            offsets.append(last.offset @ self.attached.offset)
            he.append(self.attached.half_extents)
        return (
            np.array(joints, dtype=int),
            np.stack([o.rotation for o in offsets]),
            np.stack([o.translation for o in offsets]),
            np.stack(he),
        )


def _rodrigues(axis: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Rotation matrices about one fixed axis for an array of angles, (..., 3, 3)."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(q)[..., None, None]
    c = np.cos(q)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def fk_arrays(chain: ChainSpec, Q):
    """Batched forward kinematics.

    ``Q`` has shape (..., m). Returns a dict with
      R: (..., n_boxes, 3, 3) box rotations; p: (..., n_boxes, 3) box centres;
      axis: (..., m, 3) world joint axes; pivot: (..., m, 3) world joint origins;
      box_joint: (n_boxes,) joint index driving each box; he: (n_boxes, 3).
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape[-1] != chain.m:
        raise ValueError(f"expected {chain.m} joint values, got shape {Q.shape}")
    lead = Q.shape[:-1]
    FR = np.broadcast_to(np.eye(3), lead + (3, 3))
    Fp = np.zeros(lead + (3,))
    joint_R, joint_p, axes, pivots = [], [], [], []
    for k, jt in enumerate(chain.joints):
        Fp = Fp + FR @ jt.origin.translation
        FR = FR @ jt.origin.rotation
        axes.append(FR @ jt.axis)
        pivots.append(Fp)
        FR = FR @ _rodrigues(jt.axis, Q[..., k])
        joint_R.append(FR)
        joint_p.append(Fp)
    joint_R = np.stack(joint_R, axis=-3)
    joint_p = np.stack(joint_p, axis=-2)
    box_joint, off_R, off_p, he = chain.box_table()
    JR = joint_R[..., box_joint, :, :]
    Jp = joint_p[..., box_joint, :]
    R = JR @ off_R
    p = Jp + np.einsum("...ij,...j->...i", JR, off_p)
    return {
        "R": R,
        "p": p,
        "axis": np.stack(axes, axis=-2),
        "pivot": np.stack(pivots, axis=-2),
        "box_joint": box_joint,
        "he": he,
    }


def _check_q(chain: ChainSpec, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape != (chain.m,):
        raise ValueError(f"joint state must have shape ({chain.m},), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("joint state must be finite")
    return s


def fk(chain: ChainSpec, s) -> list[Cuboid]:
    """World-frame cuboid per link (attached object last)."""
    out = fk_arrays(chain, _check_q(chain, s))
    return [Cuboid(Pose(R, p), he) for R, p, he in zip(out["R"], out["p"], out["he"])]


def upstream_mask(chain: ChainSpec) -> np.ndarray:
    """(n_boxes, m) boolean: does joint j move box i."""
    box_joint = chain.box_table()[0]
    return np.arange(chain.m)[None, :] <= box_joint[:, None]


def fk_grad(chain: ChainSpec, s) -> np.ndarray:
    """Jacobian of every box vertex w.r.t. every joint angle, shape (n_boxes, 8, 3, m)."""
    out = fk_arrays(chain, _check_q(chain, s))
    local = CORNER_SIGNS[None] * out["he"][:, None, :]
    verts = np.einsum("bij,bkj->bki", out["R"], local) + out["p"][:, None, :]
    w, o = out["axis"], out["pivot"]
    # (boxes, 8, m, 3): axis_j x (v - pivot_j)
    J = np.cross(w[None, None], verts[:, :, None, :] - o[None, None])
    J = J * upstream_mask(chain)[:, None, :, None]
    return np.swapaxes(J, -1, -2)


def box_vertices(chain: ChainSpec, s) -> np.ndarray:
    out = fk_arrays(chain, _check_q(chain, s))
    local = CORNER_SIGNS[None] * out["he"][:, None, :]
    return np.einsum("bij,bkj->bki", out["R"], local) + out["p"][:, None, :]


def clip_joints(s, chain: ChainSpec) -> np.ndarray:
    """Clamp joint values to their limits; works on any (..., m) array."""
    return np.clip(np.asarray(s, dtype=float), chain.lower, chain.upper)


def within_limits(s, chain: ChainSpec) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.all((s >= chain.lower) & (s <= chain.upper), axis=-1)


def self_collision_pairs(chain: ChainSpec) -> np.ndarray:
    """Box index pairs checked for self collision.

    Neighbours in box order and boxes riding on the same joint frame are exempt.
    """
    box_joint = chain.box_table()[0]
    n = len(box_joint)
    pairs = [
        (i, j)
        for i in range(n)
        for j in range(i + 2, n)
        if box_joint[i] != box_joint[j]
    ]
    return np.array(pairs, dtype=int).reshape(-1, 2)


def self_collision_arrays(chain: ChainSpec, Q) -> np.ndarray:
    """Self-collision flags for a batch of configurations (..., m) -> (...)."""
    pairs = self_collision_pairs(chain)
    out = fk_arrays(chain, Q)
    lo, hi = aabb_arrays(out["R"], out["p"], out["he"])
    if len(pairs) == 0:
        return np.zeros(np.shape(Q)[:-1], dtype=bool)
    v = overlap_arrays(lo[..., pairs[:, 0], :], hi[..., pairs[:, 0], :], lo[..., pairs[:, 1], :], hi[..., pairs[:, 1], :])
    return np.any(v > 0, axis=-1)


def self_collision(chain: ChainSpec, s) -> bool:
    return bool(self_collision_arrays(chain, _check_q(chain, s)))


def attach_object(chain: ChainSpec, half_extents, offset: Pose | None = None) -> ChainSpec:
    if chain.attached is not None:
        warnings.warn("chain already carries an object; replacing it", stacklevel=2)
    return replace(chain, attached=Attachment(half_extents, offset or Pose()))


def default_chain() -> ChainSpec:
    """Three-joint spatial arm (z, y, y axes): a 0.7 m column then two 0.7 m links."""
    he = (0.35, 0.05, 0.05)
    up = Pose.from_xyz_rpy((0.0, 0.0, 0.35), (0.0, -np.pi / 2, 0.0))
    along = Pose.from_xyz_rpy((0.35, 0.0, 0.0))
    joints = (
        Joint((0.0, 0.0, 1.0)),
        Joint((0.0, 1.0, 0.0), Pose.from_xyz_rpy((0.0, 0.0, 0.7))),
        Joint((0.0, 1.0, 0.0), Pose.from_xyz_rpy((0.7, 0.0, 0.0))),
    )
    links = (Link(0, he, up), Link(1, he, along), Link(2, he, along))
    return ChainSpec(joints, links, name="desk3")


# --- JSON ---------------------------------------------------------------------


def _pose_to_json(p: Pose) -> dict:
    return {"xyz": p.translation.tolist(), "rpy": matrix_rpy(p.rotation).tolist()}


def _pose_from_json(d, path: str) -> Pose:
    _only(d, {"xyz", "rpy"}, path)
    xyz = _vec(d.get("xyz", [0, 0, 0]), 3, f"{path}.xyz")
    rpy = _vec(d.get("rpy", [0, 0, 0]), 3, f"{path}.rpy")
    return Pose(rpy_matrix(rpy), xyz)


def _only(d, allowed: set, path: str):
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"{path}: unknown field(s) {sorted(extra)}")


def _vec(v, n: int, path: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{path}: expected {n} finite numbers, got {v!r}")
    return a


def chain_to_dict(chain: ChainSpec) -> dict:
    return {
        "format": CHAIN_FORMAT,
        "name": chain.name,
        "joints": [
            {"axis": j.axis.tolist(), "origin": _pose_to_json(j.origin), "limits": list(j.limits)}
            for j in chain.joints
        ],
        "links": [
            {"joint": lk.joint, "offset": _pose_to_json(lk.offset), "half_extents": lk.half_extents.tolist()}
            for lk in chain.links
        ],
        "attached": None
        if chain.attached is None
        else {"offset": _pose_to_json(chain.attached.offset), "half_extents": chain.attached.half_extents.tolist()},
    }


def attachment_from_dict(d, path: str = "attached") -> Attachment:
    _only(d, {"offset", "half_extents"}, path)
    offset = _pose_from_json(d.get("offset", {}), f"{path}.offset")
    try:
        return Attachment(_vec(d.get("half_extents"), 3, f"{path}.half_extents"), offset)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


def chain_from_dict(d: dict) -> ChainSpec:
    _only(d, {"format", "name", "joints", "links", "attached"}, "chain")
    if d.get("format", CHAIN_FORMAT) != CHAIN_FORMAT:
        raise ValueError(f"chain.format: unsupported {d['format']!r}")
    joints = []
    for i, jd in enumerate(d.get("joints", [])):
        path = f"joints[{i}]"
        _only(jd, {"axis", "origin", "limits"}, path)
        try:
            joints.append(
                Joint(
                    _vec(jd.get("axis"), 3, f"{path}.axis"),
                    _pose_from_json(jd.get("origin", {}), f"{path}.origin"),
                    tuple(_vec(jd.get("limits", [-np.pi, np.pi]), 2, f"{path}.limits")),
                )
            )
        except ValueError as e:
            raise ValueError(f"{path}: {e}") from None
    links = []
    for i, ld in enumerate(d.get("links", [])):
        path = f"links[{i}]"
        _only(ld, {"joint", "offset", "half_extents"}, path)
        try:
            links.append(
                Link(
                    int(ld["joint"]),
                    _vec(ld.get("half_extents"), 3, f"{path}.half_extents"),
                    _pose_from_json(ld.get("offset", {}), f"{path}.offset"),
                )
            )
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}: {e}") from None
    att = d.get("attached")
    attached = None if att is None else attachment_from_dict(att)
    return ChainSpec(joints, links, attached, name=str(d.get("name", "chain")))


def load_chain(path) -> ChainSpec:
    return chain_from_dict(json.loads(Path(path).read_text()))


def save_chain(chain: ChainSpec, path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain), indent=2) + "\n")
