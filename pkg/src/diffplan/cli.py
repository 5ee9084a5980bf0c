"""Command line entry point: ``diffplan <subcommand> ...``.

Exit status: 0 success, 1 domain failure (e.g. no collision-free plan),
2 usage or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("diffplan")

THREADS_ENV = "DIFFPLAN_THREADS"


class UsageError(Exception):
    pass


def _default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chain(args):
    from .chain import attach_object, attachment_from_dict, default_chain, load_chain

    chain = load_chain(args.chain) if getattr(args, "chain", None) else default_chain()
    attach = getattr(args, "attach", None)
    if attach:
        att = attachment_from_dict(json.loads(Path(attach).read_text()))
        chain = attach_object(chain, att.half_extents, att.offset)
    return chain


def _guides(args):
    from .guidance import default_guides, load_guides

    return load_guides(args.guides) if getattr(args, "guides", None) else default_guides()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, args, **resolved) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "timing", "threads")}
    cfg.update(resolved)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def load_scene_dir(path, chain):
    from .worldgen import read_scene

    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"scene directory {path} does not exist")
    files = sorted(d.glob("*.json"))
    if not files:
        raise UsageError(f"no scene files in {path}")
    return [read_scene(f, chain) for f in files]


def write_trajectory_csv(path, tau, meta: dict) -> None:
    lines = ["# " + json.dumps(meta, sort_keys=True)]
    lines += [",".join(repr(float(v)) for v in row) for row in np.asarray(tau)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_csv(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows])


# --- subcommands ------------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    from .worldgen import scene_suite, write_scene

    chain = _chain(args)
    kinds = args.kinds.split(",") if args.kinds else None
    scenes = scene_suite(chain, args.count, args.seed, kinds)
    out = _out(args)
    sdir = out / "scenes"
    sdir.mkdir(exist_ok=True)
    for s in scenes:
        write_scene(s, sdir / f"{s.name}.json")
    _echo_config(out, args)
    print(f"wrote {len(scenes)} scenes to {sdir}")
    return 0


def _gen_chunk(job):
    from .worldgen import gen_prior_trajectory

    chain, seeds, h = job
    return np.stack([gen_prior_trajectory(chain, s, h) for s in seeds])


def cmd_gen_data(args) -> int:
    from .diffusion import write_dataset
    from .worldgen import _index_seed

    chain = _chain(args)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    seeds = [_index_seed(args.seed, i) for i in range(args.count)]
    chunks = [seeds[i : i + 500] for i in range(0, len(seeds), 500)]
    jobs = [(chain, c, args.horizon) for c in chunks]
    if args.threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.threads) as ex:
            parts = list(ex.map(_gen_chunk, jobs))
    else:
        parts = [_gen_chunk(j) for j in jobs]
    out = _out(args)
    write_dataset(out / "dataset.bin", np.concatenate(parts), seed=args.seed, chain=chain.name)
    _echo_config(out, args)
    print(f"wrote {args.count} trajectories to {out / 'dataset.bin'}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .diffusion import TrainConfig, make_schedule, read_dataset, train

    data, meta = read_dataset(args.data)
    sched = make_schedule(args.T, args.beta_max)
    widths = tuple(int(w) for w in args.widths.split(","))
    cfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed,
                      condition=not args.no_condition, widths=widths, cosine=not args.no_cosine,
                      ema=args.ema, log_every=0)
    res = train(data, sched, cfg)
    out = _out(args)
    save_checkpoint(out / "model.ckpt", res.model, {
        "T": sched.T, "beta_max": sched.beta_max, "seed": args.seed, "steps": args.steps,
        "condition": cfg.condition, "m": int(meta["m"]), "h": int(meta["h"]),
    })
    (out / "loss.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.losses)))
    _echo_config(out, args, n_params=res.model.n_params())
    print(f"trained {res.model.n_params()} parameters; final loss {res.losses[-1]:.5f}")
    return 0


def _load_model(path):
    from .checkpoint import load_checkpoint
    from .diffusion import make_schedule

    model, meta = load_checkpoint(path)
    return model, make_schedule(meta["T"], meta["beta_max"]), meta


def cmd_plan(args) -> int:
    from .guidance import plan
    from .worldgen import read_scene

    chain = _chain(args)
    guides = _guides(args)
    scene = read_scene(args.scene, chain)
    model, sched, meta = _load_model(args.ckpt)
    res = plan(model, sched, scene, chain, guides, b=args.batch, seed=args.seed,
               substeps=args.substeps, multimodality=args.multimodality)
    out = _out(args)
    write_trajectory_csv(out / "trajectory.csv", res.selected, {
        "scene": scene.name, "index": res.selected_index, "guide": int(res.guide_index[res.selected_index]) + 1,
        "success": res.success, "success_any": res.success_any, "seed": args.seed, "T": sched.T,
    })
    rows = ["index,guide,final_swept,collision_free,nan_fallback"]
    rows += [f"{i},{g + 1},{c!r},{int(f)},{int(n)}" for i, (g, c, f, n) in
             enumerate(zip(res.guide_index, res.final_cost, res.collision_free, res.nan_flags))]
    (out / "batch.csv").write_text("\n".join(rows) + "\n")
    if args.timing:
        (out / "timings.json").write_text(json.dumps(res.timings, indent=2) + "\n")
    _echo_config(out, args, guides_resolved=[g.to_json() for g in guides], T=sched.T)
    print(f"{scene.name}: success={res.success} any={res.success_any} selected={res.selected_index}")
    return 0 if res.success else 1


def cmd_bench(args) -> int:
    from .evaluation import bench, success_chart_svg

    chain = _chain(args)
    guides = _guides(args)
    scenes = load_scene_dir(args.scenes, chain)
    out = _out(args)
    summaries = []
    for ck in args.ckpt:
        model, sched, meta = _load_model(ck)
        report = bench(model, sched, scenes, chain, guides, b=args.batch, seed=args.seed,
                       substeps=args.substeps, workers=args.threads)
        if not args.timing:
            for r in report.records:
                r.wall_ms = 0.0
        dest = out if len(args.ckpt) == 1 else out / f"T{sched.T}"
        dest.mkdir(exist_ok=True)
        (dest / "records.csv").write_text(report.records_csv())
        (dest / "summary.csv").write_text(report.summary_csv())
        if args.sweep_guides:
            (dest / "success_vs_guides.svg").write_text(success_chart_svg(report.prefix_success_any()))
        summaries.append((sched.T, report.success_rate("selected"), report.success_rate("any")))
    if len(summaries) > 1:
        (out / "timestep_sweep.csv").write_text(
            "T,success_selected,success_any\n" + "".join(f"{T},{a:.4f},{b:.4f}\n" for T, a, b in summaries))
    _echo_config(out, args, guides_resolved=[g.to_json() for g in guides], n_scenes=len(scenes))
    for T, a, b in summaries:
        print(f"T={T}: success_selected={a:.1f}% success_any={b:.1f}%")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    chain = _chain(args)
    results = run_all(chain, n=args.samples, seed=args.seed, tol=args.tol, net_tol=args.net_tol)
    lines = ["suite,samples,max_rel_err,tol,pass"]
    ok = True
    for r in results:
        lines.append(f"{r.name},{r.samples},{r.max_rel:.3e},{r.tol:g},{int(r.passed)}")
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err {r.max_rel:.2e} (tol {r.tol:g}, n={r.samples})")
    if args.out:
        out = _out(args)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        _echo_config(out, args)
    return 0 if ok else 1


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffplan", description="Cost-guided diffusion motion planning.")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=_default_threads())
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--chain", help="chain spec JSON (default: built-in 3-joint arm)")

    sp = sub.add_parser("gen-scenes", help="generate a scene suite")
    common(sp)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--kinds", default="", help="comma list of tabletop,shelf,cubby,sphere_field")
    sp.set_defaults(func=cmd_gen_scenes)

    sp = sub.add_parser("gen-data", help="generate the prior training dataset")
    common(sp)
    sp.add_argument("--count", type=int, default=10000)
    sp.add_argument("--horizon", type=int, default=50)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the denoiser")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--T", type=int, default=64)
    sp.add_argument("--beta-max", type=float, default=0.02)
    sp.add_argument("--steps", type=int, default=6000)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--no-cosine", action="store_true", help="keep the learning rate constant")
    sp.add_argument("--ema", type=float, default=0.999, help="weight-average decay (0 disables)")
    sp.add_argument("--widths", default="32,64,128")
    sp.add_argument("--no-condition", action="store_true", help="train without endpoint conditioning")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("plan", help="plan one scene")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--guides")
    sp.add_argument("--attach", help="object-in-hand JSON {half_extents, offset}")
    sp.add_argument("--batch", type=int, default=120)
    sp.add_argument("--substeps", type=int, default=8)
    sp.add_argument("--multimodality", type=float, default=0.0)
    sp.add_argument("--timing", action="store_true", help="also write wall-clock timings")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("bench", help="benchmark a scene directory")
    common(sp)
    sp.add_argument("--ckpt", required=True, action="append", help="repeat to sweep timesteps")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--guides")
    sp.add_argument("--attach")
    sp.add_argument("--batch", type=int, default=120)
    sp.add_argument("--substeps", type=int, default=8)
    sp.add_argument("--sweep-guides", action="store_true")
    sp.add_argument("--timing", action="store_true", help="record wall_ms (breaks byte-identical reruns)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(sp, out_required=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--net-tol", type=float, default=1e-3)
    sp.add_argument("--samples", type=int, default=100)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (UsageError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"diffplan {args.cmd}: error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
