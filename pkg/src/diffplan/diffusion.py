"""DDPM schedule, forward noising, ancestral sampling and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import Denoiser
from .rng import stream

log = logging.getLogger(__name__)

DATASET_FORMAT = "diffplan.dataset/1"


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_max: float

    def index(self, t):
        """Array position of 1-based timestep ``t``."""
        return np.asarray(t) - 1


def make_schedule(T: int, beta_max: float = 0.02) -> DiffusionSchedule:
    T = int(T)
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta_max < 1.0:
        raise ValueError("beta_max must lie in (0, 1)")
    beta = beta_max * np.arange(1, T + 1, dtype=np.float64) / T
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T, beta, alpha, alpha_bar, float(beta_max))


def forward_diffuse(x0, t, eps, sched: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` may be per-sample."""
    x0 = np.asarray(x0)
    ab = sched.alpha_bar[sched.index(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def condition_endpoints(x, s0, sg):
    """Copy of ``x`` (..., h, m) with its first and last rows set to s0 / sg."""
    out = np.array(x, copy=True)
    out[..., 0, :] = s0
    out[..., -1, :] = sg
    return out


def posterior_mean(x_t, eps_hat, t: int, sched: DiffusionSchedule):
    i = t - 1
    a, ab = sched.alpha[i], sched.alpha_bar[i]
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def sigma(t: int, sched: DiffusionSchedule) -> float:
    return float(np.sqrt(sched.beta[t - 1]))


def reverse_step(model, x_t, t: int, sched: DiffusionSchedule, z):
    """One ancestral step; ``model`` is any callable eps(x_t, t)."""
    eps_hat = model(x_t, t)
    mu = posterior_mean(x_t, eps_hat, t, sched)
    if t == 1:
        return mu
    return mu + sigma(t, sched) * np.asarray(z)


def sample(model, sched: DiffusionSchedule, s0, sg, n: int, h: int, seed: int, condition: bool = True):
    """Unguided batch from the prior, endpoints pinned at every step."""
    s0 = np.asarray(s0, dtype=np.float64)
    m = s0.shape[-1]
    x = stream(seed, "sample-init").standard_normal((n, h, m))
    if condition:
        x = condition_endpoints(x, s0, sg)
    for t in range(sched.T, 0, -1):
        z = stream(seed, "sample-z", t).standard_normal((n, h, m))
        x = reverse_step(model, x, t, sched, z)
        if condition:
            x = condition_endpoints(x, s0, sg)
    return x


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 2e-4
    seed: int = 0
    condition: bool = True
    widths: tuple = (32, 64, 128)
    log_every: int = 100
    cosine: bool = False  # anneal lr to zero over the run
    ema: float = 0.0  # decay of the weight average returned as the model; 0 keeps raw weights


@dataclass
class TrainResult:
    model: Denoiser
    sched: DiffusionSchedule
    config: TrainConfig
    losses: list = field(default_factory=list)


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params: dict, grads: dict):
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[name] -= upd.astype(params[name].dtype)


def train(data, sched: DiffusionSchedule, cfg: TrainConfig, callback=None) -> TrainResult:
    """Fit the denoiser to a (N, h, m) dataset.

    With ``cfg.condition`` the noised batch gets its first/last rows replaced by
    the clean endpoints and those rows are left out of the loss.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (count, h, m) array")
    N, h, m = data.shape
    model = Denoiser(m, h, widths=cfg.widths, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr)
    mask = np.ones(h, dtype=np.float32)
    if cfg.condition:
        mask[[0, -1]] = 0.0
    avg = {k: v.copy() for k, v in model.params.items()} if cfg.ema else None
    res = TrainResult(model, sched, cfg)
    for step in range(cfg.steps):
        if cfg.cosine:
            opt.lr = float(0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / cfg.steps)))
        rng = stream(cfg.seed, "train", step)
        idx = rng.integers(0, N, size=cfg.batch)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch, h, m)).astype(np.float32)
        x0 = data[idx]
        x_t = forward_diffuse(x0, t, eps, sched).astype(np.float32)
        if cfg.condition:
            x_t[:, 0] = x0[:, 0]
            x_t[:, -1] = x0[:, -1]
        loss, grads = model.loss_and_grad(x_t, t, eps, mask)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}")
        opt.step(model.params, grads)
        if avg is not None:
            for k, v in model.params.items():
                avg[k] += (1.0 - cfg.ema) * (v - avg[k])
        res.losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, loss)
        if callback is not None:
            callback(step, loss)
    if avg is not None:
        model.params.update(avg)
    return res


# --- dataset file ----------------------------------------------------------------


def write_dataset(path, trajs, seed: int = 0, chain: str = "") -> None:
    trajs = np.asarray(trajs)
    count, h, m = trajs.shape
    header = {"format": DATASET_FORMAT, "m": m, "h": h, "count": count, "seed": int(seed), "chain": chain}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        f.write(np.ascontiguousarray(trajs, dtype="<f4").tobytes())


def read_dataset_header(path) -> dict:
    with open(path, "rb") as f:
        line = f.readline()
    try:
        meta = json.loads(line)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: bad dataset header ({e})") from None
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a dataset file")
    return meta


def read_dataset(path):
    meta = read_dataset_header(path)
    raw = Path(path).read_bytes()
    payload = raw[raw.index(b"\n") + 1 :]
    need = meta["count"] * meta["h"] * meta["m"] * 4
    if len(payload) != need:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, header implies {need}")
    data = np.frombuffer(payload, dtype="<f4").reshape(meta["count"], meta["h"], meta["m"])
    return data, meta
