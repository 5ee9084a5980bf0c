"""Checkpoint files: JSON text header, one NUL byte, then float32 LE tensors."""
from __future__ import annotations

import json

import numpy as np

from .denoiser import Denoiser

CKPT_FORMAT = "diffplan.ckpt/1"


def save_checkpoint(path, model: Denoiser, meta: dict) -> None:
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"refusing to save non-finite tensor {k}")
    header = {
        "format": CKPT_FORMAT,
        "arch": model.arch(),
        "meta": meta,
        "tensors": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\0")
        for v in model.params.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_header(path) -> dict:
    """Header only; ``n_params`` is added from the tensor table."""
    buf = bytearray()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(4096)
            if not chunk:
                raise ValueError(f"{path}: no header terminator")
            i = chunk.find(b"\0")
            if i >= 0:
                buf += chunk[:i]
                break
            buf += chunk
    header = json.loads(buf.decode())
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    header["header_bytes"] = len(buf) + 1
    header["n_params"] = int(sum(np.prod(s) for _, s in header["tensors"]))
    return header


def load_checkpoint(path, expect_arch: dict | None = None):
    """Returns ``(model, meta)``."""
    header = read_header(path)
    arch = header["arch"]
    if expect_arch is not None and expect_arch != arch:
        diff = {k: (arch.get(k), expect_arch.get(k)) for k in set(arch) | set(expect_arch)
                if arch.get(k) != expect_arch.get(k)}
        raise ValueError(f"architecture mismatch (file, expected): {diff}")
    with open(path, "rb") as f:
        f.seek(header["header_bytes"])
        payload = f.read()
    if len(payload) != 4 * header["n_params"]:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {4 * header['n_params']}")
    flat = np.frombuffer(payload, dtype="<f4")
    params, off = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        params[name] = flat[off : off + n].reshape(shape).astype(np.float32)
        off += n
    model = Denoiser(arch["m"], arch["h"], widths=arch["widths"], kernel=arch["kernel"],
                     temb_dim=arch["temb_dim"], params=params)
    return model, header["meta"]
