"""Temporal convolutional encoder-decoder that predicts diffusion noise.

Pure numpy with a hand-written backward pass. Activations are stored
length-major, (length, batch, channels), so every kernel tap of a stride-1
convolution is a contiguous slice. Callers pass and receive (B, h, m).

Layout for widths (w0, ..., wn):
    block_0: m -> w0 at length h
    down_k, block_k+1: stride-2 conv then w_k -> w_k+1
    up_k, dblock_k: nearest upsample, concat skip, w_k+1 + w_k -> w_k
    head: 1x1 conv w0 -> m
Every block adds a learned projection of the shared timestep embedding.
"""
from __future__ import annotations

import numpy as np

from .rng import stream


def sinusoidal(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def silu(x):
    s = 0.5 + 0.5 * np.tanh(0.5 * x)
    return x * s, s


def silu_back(dy, x, s):
    return dy * s * (1.0 + x * (1.0 - s))


def _taps(xp, k, stride, Lout):
    """Input rows feeding kernel tap ``k``, flattened to (Lout * B, C)."""
    if stride == 1:
        B, C = xp.shape[1:]
        return xp.reshape(-1, C)[k * B : (k + Lout) * B]
    return xp[k : k + stride * (Lout - 1) + 1 : stride].reshape(-1, xp.shape[2])


def conv1d(x, W, b, stride=1, pad=0):
    """x (L, B, C), W (K, C, Cout) -> y (Lout, B, Cout)."""
    L, B, C = x.shape
    K, _, Cout = W.shape
    if pad:
        xp = np.zeros((L + 2 * pad, B, C), dtype=x.dtype)
        xp[pad : pad + L] = x
    else:
        xp = np.ascontiguousarray(x)
    Lout = (L + 2 * pad - K) // stride + 1
    y = _taps(xp, 0, stride, Lout) @ W[0]
    for k in range(1, K):
        y += _taps(xp, k, stride, Lout) @ W[k]
    y += b
    return y.reshape(Lout, B, Cout), (xp, stride, pad, Lout, L)


def conv1d_back(dy, W, cache):
    xp, stride, pad, Lout, L = cache
    K, C, Cout = W.shape
    B = xp.shape[1]
    dy2 = np.ascontiguousarray(dy).reshape(-1, Cout)
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    for k in range(K):
        dW[k] = _taps(xp, k, stride, Lout).T @ dy2
        dxp[k : k + stride * (Lout - 1) + 1 : stride] += (dy2 @ W[k].T).reshape(Lout, B, C)
    db = dy2.sum(axis=0)
    return dxp[pad : pad + L], dW, db


class Denoiser:
    """Noise-prediction network eps(x_t, t).

    ``params`` is an ordered dict of arrays; its dtype sets the compute dtype.
    """

    def __init__(self, m: int, h: int, widths=(32, 64, 128), kernel: int = 5, temb_dim: int = 32,
                 params: dict | None = None, seed: int = 0, zero_head: bool = False, dtype=np.float32):
        self.m, self.h = int(m), int(h)
        self.widths = tuple(int(w) for w in widths)
        self.kernel = int(kernel)
        self.temb_dim = int(temb_dim)
        shapes = self.param_shapes()
        if params is None:
            params = self._init(shapes, seed, zero_head, dtype)
        else:
            bad = {k: (params[k].shape if k in params else None, s) for k, s in shapes.items()
                   if k not in params or params[k].shape != s}
            extra = set(params) - set(shapes)
            if bad or extra:
                raise ValueError(f"parameter mismatch: {bad or ''} {sorted(extra) or ''}")
            params = {k: params[k] for k in shapes}
        self.params = params

    # -- structure -------------------------------------------------------------

    def arch(self) -> dict:
        return {"name": "tconv-unet", "m": self.m, "h": self.h, "widths": list(self.widths),
                "kernel": self.kernel, "temb_dim": self.temb_dim}

    def _blocks(self):
        """(name, cin, cout) for every residual block, in forward order."""
        w = self.widths
        out = [("enc0", self.m, w[0])]
        for k in range(1, len(w)):
            out.append((f"enc{k}", w[k - 1], w[k]))
        for k in reversed(range(len(w) - 1)):
            out.append((f"dec{k}", w[k + 1] + w[k], w[k]))
        return out

    def param_shapes(self) -> dict:
        K, E = self.kernel, self.temb_dim
        s = {"temb.W": (E, E), "temb.b": (E,)}
        for name, cin, cout in self._blocks():
            s[f"{name}.c1.W"] = (K, cin, cout)
            s[f"{name}.c1.b"] = (cout,)
            s[f"{name}.t.W"] = (E, cout)
            s[f"{name}.t.b"] = (cout,)
            s[f"{name}.c2.W"] = (K, cout, cout)
            s[f"{name}.c2.b"] = (cout,)
            if cin != cout:
                s[f"{name}.skip.W"] = (1, cin, cout)
                s[f"{name}.skip.b"] = (cout,)
        for k in range(len(self.widths) - 1):
            w = self.widths[k]
            s[f"down{k}.W"] = (3, w, w)
            s[f"down{k}.b"] = (w,)
        s["head.W"] = (1, self.widths[0], self.m)
        s["head.b"] = (self.m,)
        return s

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def _init(self, shapes, seed, zero_head, dtype):
        rng = stream(seed, "denoiser-init")
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            fan_in = shape[0] if name.endswith(".t.W") or name == "temb.W" else shape[0] * shape[1]
            scale = np.sqrt(2.0 / fan_in)
            if name.endswith(".c2.W"):
                scale *= 0.5
            if name == "head.W":
                scale = 0.0 if zero_head else 0.1 / np.sqrt(fan_in)
            params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
        return params

    # -- forward / backward ------------------------------------------------------

    def _check(self, a, where):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite activations in layer {where}")

    def _block(self, name, x, e, caches):
        P = self.params
        pad = self.kernel // 2
        h1, c1 = conv1d(x, P[f"{name}.c1.W"], P[f"{name}.c1.b"], pad=pad)
        tproj = e @ P[f"{name}.t.W"] + P[f"{name}.t.b"]
        pre1 = h1 + tproj[None]
        a1, s1 = silu(pre1)
        h2, c2 = conv1d(a1, P[f"{name}.c2.W"], P[f"{name}.c2.b"], pad=pad)
        a2, s2 = silu(h2)
        if f"{name}.skip.W" in P:
            sk, csk = conv1d(x, P[f"{name}.skip.W"], P[f"{name}.skip.b"])
        else:
            sk, csk = x, None
        out = a2 + sk
        self._check(out, name)
        caches[name] = (c1, pre1, s1, c2, h2, s2, csk)
        return out

    def _block_back(self, name, dout, e, caches, grads):
        P = self.params
        c1, pre1, s1, c2, h2, s2, csk = caches[name]
        if csk is not None:
            dx_skip, grads[f"{name}.skip.W"], grads[f"{name}.skip.b"] = conv1d_back(dout, P[f"{name}.skip.W"], csk)
        else:
            dx_skip = dout
        dh2 = silu_back(dout, h2, s2)
        da1, grads[f"{name}.c2.W"], grads[f"{name}.c2.b"] = conv1d_back(dh2, P[f"{name}.c2.W"], c2)
        dpre1 = silu_back(da1, pre1, s1)
        dtproj = dpre1.sum(axis=0)
        grads[f"{name}.t.W"] = e.T @ dtproj
        grads[f"{name}.t.b"] = dtproj.sum(axis=0)
        de = dtproj @ P[f"{name}.t.W"].T
        dx, grads[f"{name}.c1.W"], grads[f"{name}.c1.b"] = conv1d_back(dpre1, P[f"{name}.c1.W"], c1)
        return dx + dx_skip, de

    def _forward(self, x, t):
        P = self.params
        dtype = P["head.W"].dtype
        x = np.asarray(x, dtype=dtype)
        if x.ndim != 3 or x.shape[1:] != (self.h, self.m):
            raise ValueError(f"expected input (B, {self.h}, {self.m}), got {x.shape}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        caches = {}
        emb0 = sinusoidal(t, self.temb_dim).astype(dtype)
        epre = emb0 @ P["temb.W"] + P["temb.b"]
        e, es = silu(epre)
        caches["temb"] = (emb0, epre, es)
        n = len(self.widths)
        skips = []
        hcur = self._block("enc0", np.ascontiguousarray(x.transpose(1, 0, 2)), e, caches)
        for k in range(1, n):
            skips.append(hcur)
            hcur, caches[f"down{k-1}"] = conv1d(hcur, P[f"down{k-1}.W"], P[f"down{k-1}.b"], stride=2, pad=1)
            hcur = self._block(f"enc{k}", hcur, e, caches)
        for k in reversed(range(n - 1)):
            skip = skips[k]
            caches[f"up{k}"] = hcur.shape
            up = np.repeat(hcur, 2, axis=0)[: skip.shape[0]]
            hcur = self._block(f"dec{k}", np.concatenate([up, skip], axis=2), e, caches)
        y, caches["head"] = conv1d(hcur, P["head.W"], P["head.b"])
        self._check(y, "head")
        return y.transpose(1, 0, 2), caches, e

    def __call__(self, x, t) -> np.ndarray:
        return self._forward(x, t)[0]

    def backward(self, dy, caches, e) -> dict:
        """Parameter gradients given dL/d(output), dy shaped (B, h, m)."""
        P = self.params
        grads = {}
        dy = np.ascontiguousarray(np.asarray(dy).transpose(1, 0, 2))
        dh, grads["head.W"], grads["head.b"] = conv1d_back(dy, P["head.W"], caches["head"])
        de = np.zeros_like(e)
        n = len(self.widths)
        dskips = [None] * (n - 1)
        for k in range(n - 1):
            dcat, d_e = self._block_back(f"dec{k}", dh, e, caches, grads)
            de += d_e
            Lc, B, Cc = caches[f"up{k}"]
            dskips[k] = dcat[:, :, Cc:]
            full = np.zeros((2 * Lc, B, Cc), dtype=dcat.dtype)
            full[: dcat.shape[0]] = dcat[:, :, :Cc]
            dh = full.reshape(Lc, 2, B, Cc).sum(axis=1)
        for k in reversed(range(1, n)):
            dh, d_e = self._block_back(f"enc{k}", dh, e, caches, grads)
            de += d_e
            dh, grads[f"down{k-1}.W"], grads[f"down{k-1}.b"] = conv1d_back(dh, P[f"down{k-1}.W"], caches[f"down{k-1}"])
            dh = dh + dskips[k - 1]
        _, d_e = self._block_back("enc0", dh, e, caches, grads)
        de += d_e
        emb0, epre, es = caches["temb"]
        depre = silu_back(de, epre, es)
        grads["temb.W"] = emb0.T @ depre
        grads["temb.b"] = depre.sum(axis=0)
        return {k: grads[k] for k in P}

    def loss_and_grad(self, x_t, t, eps, mask=None):
        """Mean squared noise error over unmasked rows and its parameter gradient.

        ``mask`` is a (h,) weight per waypoint row (1 = in the loss).
        """
        y, caches, e = self._forward(x_t, t)
        eps = np.asarray(eps, dtype=y.dtype)
        if mask is None:
            mask = np.ones(self.h, dtype=y.dtype)
        w = np.asarray(mask, dtype=y.dtype)[None, :, None]
        n = y.shape[0] * float(w.sum()) * self.m
        r = (y - eps) * w
        loss = float((r * r).sum() / n)
        grads = self.backward((2.0 / n) * r, caches, e)
        return loss, grads
