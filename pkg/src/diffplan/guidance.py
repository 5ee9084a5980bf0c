"""Collision costs, per-guide gradients and the ensemble-guided planner."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chain import ChainSpec, clip_joints, fk_arrays, upstream_mask
from .diffusion import DiffusionSchedule, condition_endpoints, posterior_mean, sigma
from .geom import Expansion, aabb_arrays, expand_half_extents, overlap_grad_arrays, swept_grad_arrays
from .rng import stream

TEMPERATURE = 0.1


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """``constant``: value; ``linear``: start at t=T down to end as t->0;
    ``affine``: start + end * t/T (weights)."""

    kind: str = "constant"
    start: float = 0.0
    end: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "affine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind != "affine" and (self.start < 0 or self.end < 0):
            raise ValueError("schedule values must be non-negative")

    def __call__(self, t: int, T: int) -> float:
        if self.kind == "constant":
            return self.start
        if self.kind == "linear":
            return self.end + (self.start - self.end) * t / T
        return self.start + self.end * t / T

    def to_json(self):
        if self.kind == "constant":
            return {"kind": "constant", "value": self.start}
        if self.kind == "linear":
            return {"kind": "linear", "start": self.start, "end": self.end}
        return {"kind": "affine", "w0": self.start, "w1": self.end}

    @classmethod
    def from_json(cls, d, path="schedule"):
        if isinstance(d, (int, float)):
            return cls("constant", float(d))
        kind = d.get("kind")
        keys = {"constant": {"kind", "value"}, "linear": {"kind", "start", "end"}, "affine": {"kind", "w0", "w1"}}
        if kind not in keys:
            raise ValueError(f"{path}.kind: unknown {kind!r}")
        if set(d) - keys[kind]:
            raise ValueError(f"{path}: unknown field(s) {sorted(set(d) - keys[kind])}")
        if kind == "constant":
            return cls(kind, float(d["value"]))
        if kind == "linear":
            return cls(kind, float(d["start"]), float(d["end"]))
        return cls(kind, float(d["w0"]), float(d["w1"]))


def constant(v: float) -> Schedule:
    return Schedule("constant", v)


@dataclass(frozen=True)
class GuideConfig:
    cost: str = "intersection"
    clearance: Schedule = field(default_factory=lambda: constant(0.0))
    expansion: Expansion = Expansion.NONE
    normalize: bool = False
    weight: Schedule = field(default_factory=lambda: constant(1.0))

    def __post_init__(self):
        if self.cost not in ("intersection", "swept"):
            raise ValueError(f"unknown cost {self.cost!r}")
        object.__setattr__(self, "expansion", Expansion(self.expansion))
        if self.weight.kind == "affine" and (self.weight.start < 0 or self.weight.start + self.weight.end < 0):
            raise ValueError("weight schedule must stay non-negative")

    def to_json(self) -> dict:
        return {"cost": self.cost, "clearance": self.clearance.to_json(), "expansion": self.expansion.value,
                "normalize": self.normalize, "weight": self.weight.to_json()}

    @classmethod
    def from_json(cls, d, path="guide"):
        allowed = {"cost", "clearance", "expansion", "normalize", "weight"}
        if not isinstance(d, dict) or set(d) - allowed:
            raise ValueError(f"{path}: unknown field(s) {sorted(set(d) - allowed) if isinstance(d, dict) else d}")
        return cls(
            cost=d.get("cost", "intersection"),
            clearance=Schedule.from_json(d.get("clearance", 0.0), f"{path}.clearance"),
            expansion=Expansion(d.get("expansion", "none")),
            normalize=bool(d.get("normalize", False)),
            weight=Schedule.from_json(d.get("weight", 1.0), f"{path}.weight"),
        )


def default_guides() -> list[GuideConfig]:
    """The twelve-member ensemble."""
    inter_w = Schedule("affine", 1.4, 1.0)
    rows = [
        ("intersection", constant(0.1), "none", False, inter_w),
        ("intersection", constant(0.05), "none", False, inter_w),
        ("intersection", constant(0.01), "none", False, inter_w),
        ("intersection", constant(0.15), "none", False, inter_w),
        ("intersection", Schedule("linear", 0.15, 0.01), "none", False, inter_w),
        ("swept", constant(0.06), "type1", False, inter_w),
        ("swept", constant(0.0), "type2", True, constant(0.05)),
        ("swept", constant(0.0), "type2", True, constant(0.01)),
        ("swept", constant(0.02), "type2", True, constant(0.1)),
        ("swept", constant(0.1), "type2", True, constant(0.1)),
        ("swept", constant(0.05), "type3", True, constant(0.05)),
        ("swept", constant(0.05), "type3", True, constant(0.1)),
    ]
    return [GuideConfig(c, cl, Expansion(e), n, w) for c, cl, e, n, w in rows]


def load_guides(path) -> list[GuideConfig]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc.get("guides")
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: expected a non-empty list of guides")
    return [GuideConfig.from_json(g, f"guides[{i}]") for i, g in enumerate(doc)]


def save_guides(guides, path) -> None:
    Path(path).write_text(json.dumps([g.to_json() for g in guides], indent=2) + "\n")


# --- costs ---------------------------------------------------------------------


def obstacle_extents(obstacles, clearance: float = 0.0, expansion=Expansion.NONE, t: int = 1, T: int = 1):
    """World AABBs (lo, hi), each (n, 3), of the inflated obstacles."""
    if not obstacles:
        return np.zeros((0, 3)), np.zeros((0, 3))
    R = np.stack([o.pose.rotation for o in obstacles])
    p = np.stack([o.pose.translation for o in obstacles])
    he = np.stack([expand_half_extents(o.half_extents + clearance, expansion, t, T) for o in obstacles])
    return aabb_arrays(R, p, he)


def link_boxes(chain: ChainSpec, Q, jac: bool = True):
    """Link AABBs for configurations (..., m) and their joint derivatives.

    Returns lo, hi of shape (..., nb, 3) and, with ``jac``, dlo, dhi of shape
    (..., nb, m, 3).
    """
    out = fk_arrays(chain, Q)
    R, p, he = out["R"], out["p"], out["he"]
    lo, hi = aabb_arrays(R, p, he)
    if not jac:
        return lo, hi, None, None
    w = out["axis"][..., None, :, :]  # (..., 1, m, 3)
    mask = upstream_mask(chain)[..., None]  # (nb, m, 1)
    dp = np.cross(w, p[..., :, None, :] - out["pivot"][..., None, :, :]) * mask
    # columns of R: Rc[..., b, c, :] = R[..., b, :, c]
    Rc = np.swapaxes(R, -1, -2)
    dRc = np.cross(w[..., None, :], Rc[..., :, None, :, :])  # (..., nb, m, c, 3)
    sgn = np.sign(Rc)[..., :, None, :, :]
    dr = (sgn * dRc * he[:, None, :, None]).sum(-2) * mask
    return lo, hi, dp - dr, dp + dr


def _pull_back(g_lo, g_hi, dlo, dhi):
    """Per-waypoint box gradients (..., nb, 3) to joint gradients (..., m)."""
    return np.einsum("...ba,...bja->...j", g_lo, dlo) + np.einsum("...ba,...bja->...j", g_hi, dhi)


def _inter(lo, hi, Olo, Ohi):
    V, g_lo, g_hi = overlap_grad_arrays(lo[..., None, :], hi[..., None, :], Olo, Ohi)
    return V.sum(axis=(-1, -2)), g_lo.sum(-2), g_hi.sum(-2)


def cost_and_grad(kind: str, tau, chain: ChainSpec, Olo, Ohi, grad: bool = True):
    """Cost per trajectory (...,) and d cost / d tau (..., h, m)."""
    tau = np.asarray(tau, dtype=float)
    lo, hi, dlo, dhi = link_boxes(chain, tau, jac=grad)
    if len(Olo) == 0:
        return np.zeros(tau.shape[:-2]), np.zeros_like(tau)
    if kind == "intersection":
        V, g_lo, g_hi = _inter(lo, hi, Olo, Ohi)
        cost = V.sum(-1)
        if not grad:
            return cost, None
        return cost, _pull_back(g_lo, g_hi, dlo, dhi)
    if kind != "swept":
        raise ValueError(f"unknown cost {kind!r}")
    lo0, hi0, lo1, hi1 = lo[..., :-1, :, :], hi[..., :-1, :, :], lo[..., 1:, :, :], hi[..., 1:, :, :]
    slo, shi = np.minimum(lo0, lo1), np.maximum(hi0, hi1)
    V, g_lo, g_hi = _inter(slo, shi, Olo, Ohi)
    cost = V.sum(-1)
    if not grad:
        return cost, None
    a_lo, a_hi, b_lo, b_hi = swept_grad_arrays(lo0, hi0, lo1, hi1, g_lo, g_hi)
    G_lo = np.zeros_like(lo)
    G_hi = np.zeros_like(hi)
    G_lo[..., :-1, :, :] += a_lo
    G_hi[..., :-1, :, :] += a_hi
    G_lo[..., 1:, :, :] += b_lo
    G_hi[..., 1:, :, :] += b_hi
    return cost, _pull_back(G_lo, G_hi, dlo, dhi)


def j_inter(tau, scene, chain, clearance=0.0, expansion=Expansion.NONE, t=1, T=1) -> float:
    Olo, Ohi = obstacle_extents(scene.obstacle_cuboids(), clearance, expansion, t, T)
    return float(cost_and_grad("intersection", tau, chain, Olo, Ohi, grad=False)[0])


def j_swept(tau, scene, chain, clearance=0.0, expansion=Expansion.NONE, t=1, T=1) -> float:
    Olo, Ohi = obstacle_extents(scene.obstacle_cuboids(), clearance, expansion, t, T)
    return float(cost_and_grad("swept", tau, chain, Olo, Ohi, grad=False)[0])


def guide_gradient(cfg: GuideConfig, tau, scene, chain, t: int, T: int):
    """Weighted (optionally normalized) cost gradient, endpoint rows zeroed.

    ``tau`` may be a single (h, m) trajectory or a batch (B, h, m).
    """
    Olo, Ohi = _scene_extents(scene, cfg, t, T)
    _, g = cost_and_grad(cfg.cost, tau, chain, Olo, Ohi)
    g[..., 0, :] = 0.0
    g[..., -1, :] = 0.0
    if cfg.normalize:
        n = np.sqrt((g * g).sum(axis=(-1, -2), keepdims=True))
        g = np.divide(g, n, out=np.zeros_like(g), where=n > 0)
    return cfg.weight(t, T) * g


# --- multimodality ----------------------------------------------------------------


def _unit_rows(batch):
    X = np.asarray(batch, dtype=float).reshape(len(batch), -1)
    n = np.linalg.norm(X, axis=1)
    safe = np.where(n > 0, n, 1.0)
    U = np.where(n[:, None] > 0, X / safe[:, None], 0.0)
    return X, U, n, safe


def cosine_matrix(batch) -> np.ndarray:
    """Pairwise cosine similarity; self-similarity is exactly 1 (0 for a zero row)."""
    _, U, n, _ = _unit_rows(batch)
    C = np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(C, (n > 0).astype(float))
    return C


def literal_contrastive(batch) -> float:
    """-sum_ij I_ij log C_ij with raw cosine similarities."""
    C = cosine_matrix(batch)
    with np.errstate(divide="ignore"):
        return float(-np.sum(np.log(np.diag(C))))


def multimodality_cost(batch, temperature: float = TEMPERATURE):
    """Row-softmax contrastive loss on cosine similarities and its gradient."""
    batch = np.asarray(batch, dtype=float)
    if len(batch) < 2:
        raise ValueError("need at least two trajectories")
    X, U, n, safe = _unit_rows(batch)
    logits = (U @ U.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    cost = float(-np.sum(np.log(np.diag(P))))
    G = (P - np.eye(len(P))) / temperature
    dU = (G + G.T) @ U
    dX = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / safe[:, None]
    dX[n == 0] = 0.0
    return cost, dX.reshape(batch.shape)


# --- planner -------------------------------------------------------------------


def split_sizes(b: int, n: int) -> list[int]:
    """Sub-batch sizes; the first ``b % n`` guides get one extra trajectory."""
    if n < 1 or b < n:
        raise ValueError(f"cannot split {b} trajectories over {n} guides")
    base, extra = divmod(b, n)
    return [base + (i < extra) for i in range(n)]


def slot_noise(seed: int, purpose: str, sizes, h: int, m: int, *counters) -> np.ndarray:
    """Standard normal draws keyed by sub-batch, so slots are independent."""
    return np.concatenate(
        [stream(seed, purpose, i, *counters).standard_normal((s, h, m)) for i, s in enumerate(sizes)]
    )


def guided_reverse_step(model, x_t, t: int, sched: DiffusionSchedule, cfg: GuideConfig, scene, chain,
                        z, eps_hat=None, extra_grad=None):
    """One guided step for a sub-batch. Returns (x_{t-1}, nan_flags)."""
    x_t = np.asarray(x_t, dtype=float)
    if eps_hat is None:
        eps_hat = model(x_t, t)
    mu = clip_joints(posterior_mean(x_t, eps_hat, t, sched), chain)
    g = guide_gradient(cfg, mu, scene, chain, t, sched.T)
    if extra_grad is not None:
        g = g + extra_grad
    bad = ~np.all(np.isfinite(g), axis=(-1, -2))
    g[bad] = 0.0
    mu = mu - g
    if t > 1:
        mu = mu + sigma(t, sched) * z
    return condition_endpoints(mu, scene.start, scene.goal), bad


@dataclass
class PlanResult:
    selected: np.ndarray
    selected_index: int
    batch: np.ndarray
    guide_index: np.ndarray
    final_cost: np.ndarray
    collision_free: np.ndarray
    nan_flags: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return bool(self.collision_free[self.selected_index])

    @property
    def success_any(self) -> bool:
        return bool(self.collision_free.any())

    def guide_flags(self, n_guides: int) -> np.ndarray:
        """Per guide: does its sub-batch hold a collision-free trajectory."""
        return np.array([self.collision_free[self.guide_index == i].any() for i in range(n_guides)])


def plan(model, sched: DiffusionSchedule, scene, chain: ChainSpec, guides=None, b: int = 120, seed: int = 0,
         substeps: int = 8, multimodality: float = 0.0) -> PlanResult:
    from .evaluation import oracle_collision_free_batch

    guides = default_guides() if guides is None else list(guides)
    sizes = split_sizes(b, len(guides))
    h, m = model.h, chain.m
    if model.m != m:
        raise ValueError(f"model expects {model.m} joints, chain has {m}")
    bounds = np.cumsum([0] + sizes)
    gidx = np.repeat(np.arange(len(guides)), sizes)
    obst = scene.obstacle_cuboids()
    t0 = time.perf_counter()

    x = condition_endpoints(slot_noise(seed, "plan-init", sizes, h, m), scene.start, scene.goal)
    nan_flags = np.zeros(b, dtype=bool)
    for t in range(sched.T, 0, -1):
        # the model runs per sub-batch so a slot never depends on its neighbours' contents
        eps_hat = np.concatenate([model(x[bounds[i]:bounds[i + 1]], t) for i in range(len(guides))])
        z = slot_noise(seed, "plan-z", sizes, h, m, t) if t > 1 else np.zeros_like(x)
        extra = None
        if multimodality:
            mu_all = clip_joints(posterior_mean(x, eps_hat, t, sched), chain)
            _, gm = multimodality_cost(mu_all)
            gm[:, 0] = 0.0
            gm[:, -1] = 0.0
            extra = multimodality * gm
        nxt = np.empty_like(x)
        for i, cfg in enumerate(guides):
            sl = slice(bounds[i], bounds[i + 1])
            ext = obstacle_extents(obst, cfg.clearance(t, sched.T), cfg.expansion, t, sched.T)
            step_scene = _SceneView(scene, ext)
            nxt[sl], bad = guided_reverse_step(
                model, x[sl], t, sched, cfg, step_scene, chain, z[sl], eps_hat=eps_hat[sl],
                extra_grad=None if extra is None else extra[sl])
            nan_flags[sl] |= bad
        x = nxt
    t_denoise = time.perf_counter() - t0

    Olo, Ohi = obstacle_extents(obst)
    final, _ = cost_and_grad("swept", x, chain, Olo, Ohi, grad=False)
    sel = int(np.argmin(final))
    free = oracle_collision_free_batch(x, scene, chain, substeps)
    return PlanResult(
        selected=x[sel].copy(), selected_index=sel, batch=x, guide_index=gidx, final_cost=final,
        collision_free=free, nan_flags=nan_flags,
        timings={"denoise_s": t_denoise, "total_s": time.perf_counter() - t0},
    )


@dataclass
class _SceneView:
    """A scene whose inflated obstacle extents are already computed."""

    scene: object
    extents: tuple

    @property
    def start(self):
        return self.scene.start

    @property
    def goal(self):
        return self.scene.goal


def _scene_extents(scene, cfg, t, T):
    if isinstance(scene, _SceneView):
        return scene.extents
    return obstacle_extents(scene.obstacle_cuboids(), cfg.clearance(t, T), cfg.expansion, t, T)
