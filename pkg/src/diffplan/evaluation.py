"""Ground-truth collision oracle, trajectory metrics and the benchmark harness."""
from __future__ import annotations

import csv
import io
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainSpec, self_collision_arrays
from .geom import overlap_arrays


def obstacle_collision(chain: ChainSpec, obstacles, Q) -> np.ndarray:
    """(...,) flags: any link box overlaps any obstacle box (zero clearance)."""
    from .guidance import link_boxes, obstacle_extents

    Q = np.asarray(Q, dtype=float)
    if not obstacles:
        return np.zeros(Q.shape[:-1], dtype=bool)
    lo, hi, _, _ = link_boxes(chain, Q, jac=False)
    Olo, Ohi = obstacle_extents(obstacles)
    V = overlap_arrays(lo[..., :, None, :], hi[..., :, None, :], Olo, Ohi)
    return np.any(V > 0, axis=(-1, -2))


def interpolate(tau, substeps: int) -> np.ndarray:
    """Each adjacent pair split into ``substeps`` segments, endpoints included.

    (..., h, m) -> (..., (h-1)*substeps + 1, m)
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    tau = np.asarray(tau, dtype=float)
    a, b = tau[..., :-1, :], tau[..., 1:, :]
    u = (np.arange(substeps) / substeps)[:, None]
    mid = a[..., :, None, :] + u * (b - a)[..., :, None, :]
    mid = mid.reshape(tau.shape[:-2] + (-1, tau.shape[-1]))
    return np.concatenate([mid, tau[..., -1:, :]], axis=-2)


def oracle_collision_free_batch(batch, scene, chain: ChainSpec, substeps: int = 8) -> np.ndarray:
    Q = interpolate(batch, substeps)
    bad = obstacle_collision(chain, scene.obstacle_cuboids(), Q) | self_collision_arrays(chain, Q)
    return ~np.any(bad, axis=-1)


def oracle_collision_free(tau, scene, chain: ChainSpec, substeps: int = 8) -> bool:
    return bool(oracle_collision_free_batch(np.asarray(tau)[None], scene, chain, substeps)[0])


def steps(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    return np.linalg.norm(np.diff(batch, axis=-2), axis=-1)


def roughness(batch):
    """(AR, MRESG, RF2W, RL2W) averaged over the batch."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 2:
        batch = batch[None]
    d = steps(batch)
    ar = d.mean(axis=-1)
    inner = d[:, 1:-1]
    mresg = inner.max(axis=-1) if inner.shape[-1] else np.zeros(len(d))
    return (float(ar.mean()), float(mresg.mean()), float(d[:, 0].mean()), float(d[:, -1].mean()))


def path_length(tau) -> float:
    return float(steps(tau).sum())


def acsm(batch) -> float:
    """Mean cosine similarity over unordered distinct pairs."""
    from .guidance import cosine_matrix

    batch = np.asarray(batch)
    if len(batch) < 2:
        raise ValueError("need at least two trajectories")
    C = cosine_matrix(batch)
    iu = np.triu_indices(len(batch), k=1)
    return float(C[iu].mean())


# --- benchmark ---------------------------------------------------------------------


@dataclass
class SceneRecord:
    scene: str
    kind: str
    success_selected: bool
    success_any: bool
    guide_flags: list
    path_length: float
    wall_ms: float
    acsm: float = float("nan")
    guide_selected: list = field(default_factory=list)
    guide_acsm: list = field(default_factory=list)
    error: str = ""

    @property
    def flag_bits(self) -> int:
        return sum(1 << i for i, f in enumerate(self.guide_flags) if f)


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float).ravel()
    v = v[~np.isnan(v)]
    return float(v.mean()) if len(v) else float("nan")


@dataclass
class BenchReport:
    records: list
    n_guides: int

    def success_rate(self, which: str = "selected") -> float:
        if not self.records:
            return 0.0
        key = "success_selected" if which == "selected" else "success_any"
        return 100.0 * float(np.mean([getattr(r, key) for r in self.records]))

    def guide_contribution(self) -> np.ndarray:
        """Fraction of scenes where each guide's sub-batch holds a collision-free trajectory."""
        return np.mean([r.guide_flags for r in self.records], axis=0)

    def prefix_success_any(self) -> list[float]:
        """Success-of-any when only the first k guides are used, k = 1..n."""
        F = np.array([r.guide_flags for r in self.records], dtype=bool)
        return [100.0 * float(np.any(F[:, :k], axis=1).mean()) for k in range(1, self.n_guides + 1)]

    def single_guide_selected(self) -> np.ndarray:
        """Per guide: success rate of selecting within that guide's sub-batch alone."""
        return 100.0 * np.mean([r.guide_selected for r in self.records], axis=0)

    def ensemble_acsm(self) -> float:
        return _nanmean([r.acsm for r in self.records])

    def single_guide_acsm(self) -> float:
        return _nanmean([r.guide_acsm for r in self.records])

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene", "kind", "success_selected", "success_any", "guide_flags", "path_length", "wall_ms"])
        for r in sorted(self.records, key=lambda r: r.scene):
            w.writerow([r.scene, r.kind, int(r.success_selected), int(r.success_any), r.flag_bits,
                        f"{r.path_length:.6f}", f"{r.wall_ms:.0f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["scenes", len(self.records)])
        w.writerow(["success_selected", f"{self.success_rate('selected'):.4f}"])
        w.writerow(["success_any", f"{self.success_rate('any'):.4f}"])
        w.writerow(["acsm_ensemble", f"{self.ensemble_acsm():.6f}"])
        w.writerow(["acsm_single_guide_mean", f"{self.single_guide_acsm():.6f}"])
        for i, c in enumerate(self.guide_contribution()):
            w.writerow([f"guide_{i + 1}_contribution", f"{c:.4f}"])
        for k, s in enumerate(self.prefix_success_any(), start=1):
            w.writerow([f"success_any_first_{k}_guides", f"{s:.4f}"])
        return buf.getvalue()


def evaluate_plan(result, scene, n_guides: int, wall_ms: float) -> SceneRecord:
    gsel, gac = [], []
    for i in range(n_guides):
        members = np.flatnonzero(result.guide_index == i)
        best = members[np.argmin(result.final_cost[members])]
        gsel.append(bool(result.collision_free[best]))
        gac.append(acsm(result.batch[members]) if len(members) > 1 else np.nan)
    return SceneRecord(
        scene=scene.name, kind=scene.kind, success_selected=result.success, success_any=result.success_any,
        guide_flags=[bool(f) for f in result.guide_flags(n_guides)], path_length=path_length(result.selected),
        wall_ms=wall_ms, acsm=acsm(result.batch), guide_selected=gsel, guide_acsm=gac,
    )


def scene_seed(seed: int, name: str) -> int:
    """Planning seed for one scene of a suite: independent of suite order and size."""
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**31)


def _bench_one(args):
    model, sched, scene, chain, guides, b, seed, substeps = args
    from .guidance import plan

    t0 = time.perf_counter()
    try:
        res = plan(model, sched, scene, chain, guides, b=b, seed=seed, substeps=substeps)
    except Exception as e:  # recorded, never aborts the suite
        return SceneRecord(scene.name, scene.kind, False, False, [False] * len(guides), float("nan"), 0.0,
                           guide_selected=[False] * len(guides), guide_acsm=[np.nan] * len(guides), error=repr(e))
    return evaluate_plan(res, scene, len(guides), 1000.0 * (time.perf_counter() - t0))


def bench(model, sched, scenes, chain, guides, b: int = 120, seed: int = 0, substeps: int = 8,
          workers: int = 1) -> BenchReport:
    """Plan every scene; per-scene seeds derive from ``seed`` and the scene name."""
    if not scenes:
        raise ValueError("bench needs at least one scene")
    scenes = sorted(scenes, key=lambda s: s.name)
    jobs = [(model, sched, s, chain, guides, b, scene_seed(seed, s.name), substeps) for s in scenes]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_bench_one, jobs))
    else:
        records = [_bench_one(j) for j in jobs]
    return BenchReport(records, len(guides))


def success_chart_svg(values, title: str = "success vs guide count") -> str:
    """Minimal line chart of a percentage series (x = 1..n)."""
    n = len(values)
    W, H, pad = 480, 300, 40
    xs = [pad + (W - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys = [H - pad - (H - 2 * pad) * (v / 100.0) for v in values]
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">\n'
        f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>\n'
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        "</svg>\n"
    )
