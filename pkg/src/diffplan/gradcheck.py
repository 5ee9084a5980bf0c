"""Central finite-difference suites for every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import ChainSpec, Joint, Link, box_vertices, fk_grad
from .denoiser import Denoiser
from .geom import CORNER_SIGNS, Cuboid, Pose, overlap_vertex_grad
from .guidance import cost_and_grad, obstacle_extents
from .rng import stream

STEP = 1e-6


@dataclass
class GradResult:
    name: str
    samples: int
    max_rel: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel <= self.tol)


def rel_err(analytic, numeric, floor: float = 1e-12) -> float:
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic), floor))


def central_diff(f, x, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_chain(rng, m: int | None = None) -> ChainSpec:
    m = int(rng.integers(1, 5)) if m is None else m
    joints, links = [], []
    for k in range(m):
        axis = rng.standard_normal(3)
        joints.append(Joint(axis / np.linalg.norm(axis), Pose(random_rotation(rng), rng.uniform(-0.5, 0.5, 3)), (-np.pi, np.pi)))
        links.append(Link(k, rng.uniform(0.05, 0.4, 3), Pose(random_rotation(rng), rng.uniform(-0.4, 0.4, 3))))
    return ChainSpec(joints, links, name="random")


def overlapping_vertex_pair(rng, margin: float = 1e-3):
    """Two random oriented boxes whose AABBs overlap by more than ``margin`` per axis."""
    while True:
        va = Pose(random_rotation(rng), rng.uniform(-0.2, 0.2, 3)).apply(
            rng.uniform(0.1, 0.5, 3) * CORNER_SIGNS)
        vb = Pose(random_rotation(rng), rng.uniform(-0.2, 0.2, 3)).apply(
            rng.uniform(0.1, 0.5, 3) * CORNER_SIGNS)
        d = np.minimum(va.max(0), vb.max(0)) - np.maximum(va.min(0), vb.min(0))
        if np.all(d > margin):
            return va, vb


def check_overlap(n: int = 100, seed: int = 0, tol: float = 1e-4) -> GradResult:
    rng = stream(seed, "gradcheck-overlap")
    worst = 0.0
    for _ in range(n):
        va, vb = overlapping_vertex_pair(rng)
        _, ga, gb = overlap_vertex_grad(va, vb)
        both = np.concatenate([va, vb])

        def f(v):
            return overlap_vertex_grad(v[:8], v[8:])[0]

        worst = max(worst, rel_err(np.concatenate([ga, gb]), central_diff(f, both)))
    return GradResult("overlap_volume", n, worst, tol)


def check_fk(n: int = 100, seed: int = 0, tol: float = 1e-5) -> GradResult:
    rng = stream(seed, "gradcheck-fk")
    worst = 0.0
    for _ in range(n):
        chain = random_chain(rng)
        q = rng.uniform(-np.pi, np.pi, chain.m)
        J = fk_grad(chain, q)
        worst = max(worst, rel_err(J, _fk_numeric(chain, q)))
    return GradResult("fk_grad", n, worst, tol)


def _fk_numeric(chain, q, h: float = STEP):
    cols = []
    for j in range(chain.m):
        e = np.zeros(chain.m)
        e[j] = h
        cols.append((box_vertices(chain, q + e) - box_vertices(chain, q - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def random_cost_case(rng, chain: ChainSpec | None = None, h: int = 5):
    """A (chain, trajectory, obstacle extents) triple with non-zero cost."""
    while True:
        ch = chain if chain is not None else random_chain(rng, int(rng.integers(2, 5)))
        tau = rng.uniform(-np.pi, np.pi, (h, ch.m))
        obstacles = [
            Cuboid(Pose(random_rotation(rng), rng.uniform(-0.8, 0.8, 3)), rng.uniform(0.1, 0.4, 3))
            for _ in range(int(rng.integers(1, 4)))
        ]
        Olo, Ohi = obstacle_extents(obstacles, clearance=float(rng.uniform(0, 0.1)))
        if cost_and_grad("intersection", tau, ch, Olo, Ohi, grad=False)[0] > 1e-3:
            return ch, tau, (Olo, Ohi)


def check_cost(kind: str, n: int = 100, seed: int = 0, tol: float = 1e-4, chain: ChainSpec | None = None) -> GradResult:
    rng = stream(seed, "gradcheck-cost", 0 if kind == "intersection" else 1)
    worst = 0.0
    for _ in range(n):
        ch, tau, (Olo, Ohi) = random_cost_case(rng, chain)
        _, g = cost_and_grad(kind, tau, ch, Olo, Ohi)
        num = central_diff(lambda x: float(cost_and_grad(kind, x, ch, Olo, Ohi, grad=False)[0]), tau)
        worst = max(worst, rel_err(g, num))
    return GradResult(f"j_{'inter' if kind == 'intersection' else 'swept'}", n, worst, tol)


def check_denoiser(seed: int = 0, tol: float = 1e-3, widths=(4, 8), h: int = 12, m: int = 3) -> GradResult:
    """Loss gradient of a tiny float64 network against central differences."""
    rng = stream(seed, "gradcheck-net")
    net = Denoiser(m, h, widths=widths, seed=seed, dtype=np.float64)
    for v in net.params.values():  # non-zero biases exercise every path
        v += 0.1 * rng.standard_normal(v.shape)
    x = rng.standard_normal((3, h, m))
    eps = rng.standard_normal((3, h, m))
    t = np.array([1, 5, 9])
    mask = np.ones(h)
    mask[[0, -1]] = 0.0
    _, grads = net.loss_and_grad(x, t, eps, mask)
    worst = 0.0
    for name, p in net.params.items():
        def f(v, name=name):
            old = net.params[name]
            net.params[name] = v
            loss = net.loss_and_grad(x, t, eps, mask)[0]
            net.params[name] = old
            return loss

        worst = max(worst, rel_err(grads[name], central_diff(f, p, h=1e-5)))
    return GradResult("denoiser_loss", len(net.params), worst, tol)


def run_all(chain: ChainSpec | None = None, n: int = 100, seed: int = 0, tol: float = 1e-4, net_tol: float = 1e-3):
    return [
        check_overlap(n, seed, tol),
        check_fk(n, seed, min(tol, 1e-5)),
        check_cost("intersection", n, seed, tol, chain),
        check_cost("swept", n, seed, tol, chain),
        check_denoiser(seed, net_tol),
    ]
