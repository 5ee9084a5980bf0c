"""Desk-scale ablations: endpoint conditioning, diffusion timesteps, guide count.

Writes CSV tables and a success-vs-guides chart under --out (default out/ablations).
Uses the cached priors from scripts/train_priors.py.

    python3 scripts/ablations.py --scenes 50
"""
import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from diffplan import priors
from diffplan.chain import default_chain
from diffplan.diffusion import sample
from diffplan.evaluation import bench, roughness, success_chart_svg
from diffplan.guidance import default_guides
from diffplan.worldgen import gen_trajectories, scene_suite


def conditioning(out: Path, n: int = 256) -> None:
    held = gen_trajectories(default_chain(), n, seed=1)
    rows = ["model,AR,MRESG,RF2W,RL2W"]
    for name, recipe in (("with_cond", priors.PriorRecipe()),
                         ("without_cond", priors.variant(priors.PriorRecipe(), condition=False))):
        model, sched, _ = priors.trained_prior(recipe)
        x = sample(model, sched, held[:, 0], held[:, -1], n, recipe.h, seed=0)
        rows.append(name + "," + ",".join(f"{v:.5f}" for v in roughness(x)))
    rows.append("dataset," + ",".join(f"{v:.5f}" for v in roughness(priors.dataset(priors.PriorRecipe()))))
    (out / "conditioning.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))


def timesteps_and_guides(out: Path, n_scenes: int, seed: int) -> None:
    chain = default_chain()
    suite = scene_suite(chain, n_scenes, seed=seed)
    rows = ["T,success_selected,success_any"]
    for T in (16, 64, 128):
        model, sched, _ = priors.trained_prior(priors.variant(priors.PriorRecipe(), T=T))
        rep = bench(model, sched, suite, chain, default_guides(), b=120, seed=0)
        rows.append(f"{T},{rep.success_rate('selected'):.2f},{rep.success_rate('any'):.2f}")
        print(rows[-1], flush=True)
        if T == 64:
            (out / "summary_T64.csv").write_text(rep.summary_csv())
            (out / "success_vs_guides.svg").write_text(success_chart_svg(rep.prefix_success_any()))
    (out / "timesteps.csv").write_text("\n".join(rows) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="out/ablations")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(1):
        conditioning(out)
        timesteps_and_guides(out, args.scenes, args.seed)


if __name__ == "__main__":
    main()
