"""Trained priors keyed by their full recipe and cached on disk.

The acceptance suite and the scripts share these so a model is trained once
per recipe; delete the cache directory to retrain from scratch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .chain import default_chain
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import TrainConfig, make_schedule, train
from .worldgen import gen_trajectories

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(__file__).resolve().parents[2] / ".cache"


@dataclass(frozen=True)
class PriorRecipe:
    count: int = 10000
    data_seed: int = 0
    h: int = 50
    T: int = 64
    steps: int = 6000
    batch: int = 64
    lr: float = 1e-3
    widths: tuple = (32, 64, 128)
    condition: bool = True
    cosine: bool = True
    ema: float = 0.999
    seed: int = 0

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"prior-T{self.T}-{'cond' if self.condition else 'nocond'}-{hashlib.sha256(blob).hexdigest()[:12]}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed, condition=self.condition,
                           widths=tuple(self.widths), cosine=self.cosine, ema=self.ema, log_every=0)


def dataset(recipe: PriorRecipe, cache_dir=DEFAULT_CACHE) -> np.ndarray:
    path = Path(cache_dir) / f"data-{recipe.count}-{recipe.data_seed}-{recipe.h}.npy"
    if path.exists():
        return np.load(path)
    data = gen_trajectories(default_chain(), recipe.count, recipe.data_seed, recipe.h)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, data)
    return data


def trained_prior(recipe: PriorRecipe = PriorRecipe(), cache_dir=DEFAULT_CACHE):
    """``(model, schedule, meta)``; trains and caches on a miss. ``meta['train_s']`` is the fit time."""
    path = Path(cache_dir) / f"{recipe.key()}.ckpt"
    if not path.exists():
        data = dataset(recipe, cache_dir)
        sched = make_schedule(recipe.T)
        t0 = time.perf_counter()
        res = train(data, sched, recipe.train_config())
        meta = {"T": recipe.T, "beta_max": sched.beta_max, "recipe": asdict(recipe),
                "train_s": time.perf_counter() - t0, "final_loss": float(np.mean(res.losses[-100:]))}
        log.info("trained %s in %.0f s", path.name, meta["train_s"])
        tmp = path.with_suffix(".part")
        save_checkpoint(tmp, res.model, meta)
        tmp.replace(path)
    model, meta = load_checkpoint(path)
    return model, make_schedule(meta["T"], meta["beta_max"]), meta


def variant(recipe: PriorRecipe = PriorRecipe(), **changes) -> PriorRecipe:
    return replace(recipe, **changes)
