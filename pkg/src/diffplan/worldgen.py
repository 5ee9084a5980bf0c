"""Procedural scenes, prior trajectories and scene files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .chain import ChainSpec, self_collision_arrays, within_limits
from .diffusion import write_dataset
from .geom import Cuboid, Pose, is_rotation, matrix_rpy, rpy_matrix
from .rng import stream

SCENE_FORMAT = "diffplan.scene/1"
MAX_ATTEMPTS = 1000
DEFAULT_H = 50


class SceneKind(str, Enum):
    TABLETOP = "tabletop"
    SHELF = "shelf"
    CUBBY = "cubby"
    SPHERE_FIELD = "sphere_field"


# Archetype parameters (metres). Override by passing a dict with the same keys.
WORLD = {
    "version": 1,
    "count": (3, 8),
    "radius": (0.45, 1.3),  # horizontal distance of obstacles from the base
    "table_half": (0.05, 0.2),
    "table_height_half": (0.05, 0.3),
    "slab_thickness": (0.02, 0.05),
    "shelf_distance": (0.6, 1.0),
    "shelf_depth_half": (0.15, 0.25),
    "shelf_width_half": (0.3, 0.5),
    "cubby_half": (0.25, 0.4),
    "sphere_radius": (0.08, 0.2),
    "sphere_height": (0.1, 1.5),
    "via_spread": 0.75,
}


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    half_extents: np.ndarray
    rpy: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("center", "half_extents", "rpy"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if not np.all(self.half_extents > 0):
            raise ValueError(f"obstacle half_extents must be positive, got {self.half_extents}")

    @property
    def cuboid(self) -> Cuboid:
        return Cuboid(Pose(rpy_matrix(self.rpy), self.center), self.half_extents)


@dataclass
class Scene:
    obstacles: list
    start: np.ndarray
    goal: np.ndarray
    name: str = "scene"
    kind: str = ""

    def obstacle_cuboids(self) -> list[Cuboid]:
        return [o.cuboid for o in self.obstacles]


# --- scene generation -------------------------------------------------------------


def _u(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def _yaw_pose(center, yaw) -> Pose:
    return Pose(rpy_matrix((0.0, 0.0, yaw)), center)


def _panel_set(rng, unit: Pose, panels):
    """Place panels given as (local centre, half extents) inside a yawed unit."""
    out = []
    yaw = float(matrix_rpy(unit.rotation)[2])
    for c, he in panels:
        out.append(Obstacle(unit.apply(np.asarray(c, dtype=float)), he, (0.0, 0.0, yaw)))
    return out


def _tabletop(rng, W):
    n = int(rng.integers(W["count"][0], W["count"][1] + 1))
    obs = []
    for _ in range(n):
        r, a = _u(rng, W["radius"]), rng.uniform(-np.pi, np.pi)
        he = np.array([_u(rng, W["table_half"]), _u(rng, W["table_half"]), _u(rng, W["table_height_half"])])
        obs.append(Obstacle((r * np.cos(a), r * np.sin(a), he[2]), he, (0.0, 0.0, rng.uniform(-np.pi, np.pi))))
    return obs


def _shelf(rng, W):
    d, yaw = _u(rng, W["shelf_distance"]), rng.uniform(-np.pi, np.pi)
    depth, width = _u(rng, W["shelf_depth_half"]), _u(rng, W["shelf_width_half"])
    n_slabs = int(rng.integers(2, 5))
    height = 0.3 + 0.3 * n_slabs
    unit = _yaw_pose((d * np.cos(yaw), d * np.sin(yaw), 0.0), yaw)
    panels = []
    for k in range(n_slabs):
        th = _u(rng, W["slab_thickness"]) / 2
        z = 0.2 + k * (height - 0.2) / max(n_slabs - 1, 1)
        panels.append(((0.0, 0.0, z), (depth, width, th)))
    for side in (-1, 1):
        th = _u(rng, W["slab_thickness"]) / 2
        panels.append(((0.0, side * (width + th), height / 2), (depth, th, height / 2)))
    if n_slabs + 2 < W["count"][1] and rng.uniform() < 0.5:
        th = _u(rng, W["slab_thickness"]) / 2
        panels.append(((depth + th, 0.0, height / 2), (th, width, height / 2)))
    return _panel_set(rng, unit, panels)


def _cubby(rng, W):
    d, yaw = _u(rng, W["shelf_distance"]), rng.uniform(-np.pi, np.pi)
    s = _u(rng, W["cubby_half"])
    z0 = rng.uniform(0.3, 0.8)
    unit = _yaw_pose((d * np.cos(yaw), d * np.sin(yaw), z0), yaw)
    th = [_u(rng, W["slab_thickness"]) / 2 for _ in range(6)]
    panels = [
        ((0.0, 0.0, s), (s, s, th[0])),  # top
        ((0.0, 0.0, -s), (s, s, th[1])),  # bottom
        ((0.0, -s, 0.0), (s, th[2], s)),  # sides
        ((0.0, s, 0.0), (s, th[3], s)),
        ((s, 0.0, 0.0), (th[4], s, s)),  # back
    ]
    if rng.uniform() < 0.5:
        panels.append(((0.0, 0.0, 0.0), (s, th[5], s)))  # divider
    else:
        panels.append(((0.0, 0.0, 0.0), (s, s, th[5])))  # middle shelf
    return _panel_set(rng, unit, panels)


def _sphere_field(rng, W):
    n = int(rng.integers(W["count"][0], W["count"][1] + 1))
    obs = []
    for _ in range(n):
        r, a = _u(rng, W["radius"]), rng.uniform(-np.pi, np.pi)
        rad = _u(rng, W["sphere_radius"])
        obs.append(Obstacle((r * np.cos(a), r * np.sin(a), _u(rng, W["sphere_height"])), (rad, rad, rad)))
    return obs


_BUILDERS = {
    SceneKind.TABLETOP: _tabletop,
    SceneKind.SHELF: _shelf,
    SceneKind.CUBBY: _cubby,
    SceneKind.SPHERE_FIELD: _sphere_field,
}


class GenerationError(RuntimeError):
    pass


def config_free(chain: ChainSpec, obstacles, Q) -> np.ndarray:
    """Zero-clearance check of configurations (..., m): no obstacle overlap, no self collision."""
    from .evaluation import obstacle_collision

    Q = np.asarray(Q, dtype=float)
    return ~(obstacle_collision(chain, obstacles, Q) | self_collision_arrays(chain, Q))


def gen_scene(kind, chain: ChainSpec, seed: int, world: dict | None = None, name: str | None = None) -> Scene:
    kind = SceneKind(kind)
    W = dict(WORLD, **(world or {}))
    rng = stream(seed, "scene", list(SceneKind).index(kind))
    obstacles = _BUILDERS[kind](rng, W)
    cubs = [o.cuboid for o in obstacles]
    lo, hi = chain.lower, chain.upper
    for _ in range(MAX_ATTEMPTS):
        pair = rng.uniform(lo, hi, size=(2, chain.m))
        if np.all(config_free(chain, cubs, pair)):
            return Scene(obstacles, pair[0], pair[1], name or f"{kind.value}-{seed}", kind.value)
    raise GenerationError(f"no valid start/goal for {kind.value} seed {seed}")


# --- prior trajectories --------------------------------------------------------------


def min_jerk(u):
    u = np.asarray(u, dtype=float)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def quintic_through(knots, h: int) -> np.ndarray:
    """Rest-to-rest minimum-jerk segments through ``knots`` (k, m), h samples.

    Segment durations are proportional to segment length, so the mean joint
    speed is the same on every segment.
    """
    knots = np.asarray(knots, dtype=float)
    seg = np.linalg.norm(np.diff(knots, axis=0), axis=1)
    total = seg.sum()
    u = np.linspace(0.0, 1.0, h)
    if total == 0.0:
        return np.repeat(knots[:1], h, axis=0)
    bounds = np.concatenate([[0.0], np.cumsum(seg) / total])
    bounds[-1] = 1.0
    out = np.empty((h, knots.shape[1]))
    idx = np.clip(np.searchsorted(bounds, u, side="right") - 1, 0, len(seg) - 1)
    for k in range(h):
        j = idx[k]
        dur = bounds[j + 1] - bounds[j]
        s = 1.0 if dur == 0 else min_jerk(np.clip((u[k] - bounds[j]) / dur, 0.0, 1.0))
        out[k] = knots[j] + s * (knots[j + 1] - knots[j])
    return out


def gen_prior_trajectory(chain: ChainSpec, seed: int, h: int = DEFAULT_H, world: dict | None = None,
                         n_via: int | None = None) -> np.ndarray:
    W = dict(WORLD, **(world or {}))
    rng = stream(seed, "prior")
    lo, hi = chain.lower, chain.upper
    for _ in range(MAX_ATTEMPTS):
        start, goal = rng.uniform(lo, hi, size=(2, chain.m))
        k = int(rng.integers(0, 3)) if n_via is None else n_via
        u = np.sort(rng.uniform(0.2, 0.8, size=k))
        via = start + u[:, None] * (goal - start) + rng.uniform(-W["via_spread"], W["via_spread"], size=(k, chain.m))
        tau = quintic_through(np.vstack([start, via, goal]), h)
        if np.all(within_limits(tau, chain)) and not np.any(self_collision_arrays(chain, tau)):
            return tau
    raise GenerationError(f"prior trajectory generation failed for seed {seed}")


def gen_trajectories(chain: ChainSpec, count: int, seed: int, h: int = DEFAULT_H) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    out = np.empty((count, h, chain.m))
    for i in range(count):
        try:
            out[i] = gen_prior_trajectory(chain, _index_seed(seed, i), h)
        except GenerationError as e:
            raise GenerationError(f"trajectory {i}: {e}") from None
    return out


def _index_seed(seed: int, i: int) -> int:
    return int(stream(seed, "index", i).integers(0, 2**63 - 1))


def gen_dataset(chain: ChainSpec, count: int, seed: int, path, h: int = DEFAULT_H) -> np.ndarray:
    trajs = gen_trajectories(chain, count, seed, h)
    write_dataset(path, trajs, seed=seed, chain=chain.name)
    return trajs


def scene_suite(chain: ChainSpec, n: int, seed: int, kinds=None) -> list[Scene]:
    """``n`` scenes cycling through the archetypes; failed seeds are skipped."""
    kinds = list(SceneKind) if kinds is None else [SceneKind(k) for k in kinds]
    scenes, i = [], 0
    while len(scenes) < n:
        kind = kinds[len(scenes) % len(kinds)]
        try:
            scenes.append(gen_scene(kind, chain, _index_seed(seed, i), name=f"{len(scenes):04d}-{kind.value}"))
        except GenerationError:
            pass
        i += 1
    return scenes


def straight_line_suite(chain: ChainSpec, n: int, seed: int, h: int = DEFAULT_H, substeps: int = 8,
                        kinds=None, max_tries: int = 10000) -> list[Scene]:
    """``n`` scenes whose straight joint-space line from start to goal passes the oracle.

    Candidates that fail are rejected, so each scene is solvable by construction.
    """
    from .evaluation import oracle_collision_free

    kinds = list(SceneKind) if kinds is None else [SceneKind(k) for k in kinds]
    u = np.linspace(0.0, 1.0, h)[:, None]
    scenes = []
    for i in range(max_tries):
        if len(scenes) == n:
            return scenes
        kind = kinds[len(scenes) % len(kinds)]
        try:
            sc = gen_scene(kind, chain, _index_seed(seed, i), name=f"{len(scenes):04d}-{kind.value}")
        except GenerationError:
            continue
        line = sc.start + u * (sc.goal - sc.start)
        if oracle_collision_free(line, sc, chain, substeps):
            scenes.append(sc)
    raise GenerationError(f"only {len(scenes)} of {n} straight-line scenes after {max_tries} tries")


# --- scene files ----------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "name": scene.name,
        "kind": scene.kind,
        "obstacles": [
            {"center": o.center.tolist(), "half_extents": o.half_extents.tolist(), "rpy": o.rpy.tolist()}
            for o in scene.obstacles
        ],
        "start": np.asarray(scene.start, dtype=float).tolist(),
        "goal": np.asarray(scene.goal, dtype=float).tolist(),
    }


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def _vec(v, n, path):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ValueError(f"{path}: expected {n} numbers") from None
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{path}: expected {n} finite numbers, got {v!r}")
    return a


def scene_from_dict(d: dict, chain: ChainSpec | None = None) -> Scene:
    allowed = {"format", "name", "kind", "obstacles", "start", "goal"}
    if not isinstance(d, dict):
        raise ValueError("scene: expected an object")
    if set(d) - allowed:
        raise ValueError(f"scene: unknown field(s) {sorted(set(d) - allowed)}")
    if d.get("format") != SCENE_FORMAT:
        raise ValueError(f"scene.format: expected {SCENE_FORMAT!r}, got {d.get('format')!r}")
    obstacles = []
    for i, od in enumerate(d.get("obstacles", [])):
        path = f"obstacles[{i}]"
        if not isinstance(od, dict):
            raise ValueError(f"{path}: expected an object")
        extra = set(od) - {"center", "half_extents", "rpy", "rotation"}
        if extra:
            raise ValueError(f"{path}: unknown field(s) {sorted(extra)}")
        center = _vec(od.get("center"), 3, f"{path}.center")
        he = _vec(od.get("half_extents"), 3, f"{path}.half_extents")
        if not np.all(he > 0):
            raise ValueError(f"{path}.half_extents: must be strictly positive, got {he.tolist()}")
        if "rotation" in od:
            R = np.asarray(od["rotation"], dtype=float)
            if not is_rotation(R):
                raise ValueError(f"{path}.rotation: not a proper orthonormal matrix")
            rpy = matrix_rpy(R)
        else:
            rpy = _vec(od.get("rpy", [0, 0, 0]), 3, f"{path}.rpy")
        obstacles.append(Obstacle(center, he, rpy))
    m = chain.m if chain is not None else len(d.get("start", []))
    start = _vec(d.get("start"), m, "start")
    goal = _vec(d.get("goal"), m, "goal")
    if chain is not None:
        for label, q in (("start", start), ("goal", goal)):
            for j, (v, jt) in enumerate(zip(q, chain.joints)):
                if not jt.limits[0] <= v <= jt.limits[1]:
                    raise ValueError(f"{label}[{j}]: {v} outside joint {j} limits {list(jt.limits)}")
    return Scene(obstacles, start, goal, str(d.get("name", "scene")), str(d.get("kind", "")))


def read_scene(path, chain: ChainSpec | None = None) -> Scene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: {e}") from None
    return scene_from_dict(doc, chain)
