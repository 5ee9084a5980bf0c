"""Train (or load from .cache/) every prior the acceptance suite uses.

    python3 scripts/train_priors.py [--only main]
"""
import argparse
import logging

from threadpoolctl import threadpool_limits

from diffplan import priors

RECIPES = {
    "main": priors.PriorRecipe(),
    "nocond": priors.variant(priors.PriorRecipe(), condition=False),
    "T16": priors.variant(priors.PriorRecipe(), T=16),
    "T128": priors.variant(priors.PriorRecipe(), T=128),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--only", choices=sorted(RECIPES), action="append")
    ap.add_argument("--cache", default=str(priors.DEFAULT_CACHE))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    with threadpool_limits(1):
        for name in args.only or RECIPES:
            _, _, meta = priors.trained_prior(RECIPES[name], args.cache)
            print(f"{name:7s} {RECIPES[name].key()}  fit {meta['train_s']:.0f} s  final loss {meta['final_loss']:.4f}")


if __name__ == "__main__":
    main()
