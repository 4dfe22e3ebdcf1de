"""Fused row/elementwise kernels used by the autodiff engine.

Each kernel has a numba ``@njit`` implementation and a pure-numpy twin.
The numba path is used when numba imports and ``MDT_NUMBA`` is not set to
``0``; both paths agree to rounding (see tests/test_kernels.py).
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("MDT_NUMBA", "1").lower() not in ("0", "false", "no", "off")

GELU_K = math.sqrt(2.0 / math.pi)
GELU_K2 = 2.0 * GELU_K
GELU_C = 0.044715


# --------------------------------------------------------------------------
# numpy reference implementations


def layer_norm_fwd_np(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_bwd_np(g, y, rstd):
    mg = g.mean(axis=-1, keepdims=True)
    mgy = (g * y).mean(axis=-1, keepdims=True)
    return (g - mg - y * mgy) * rstd[:, None]


def gelu_fwd_np(x):
    # tanh-form GELU written as x * sigmoid(2u): 0.5 (1 + tanh u) == sigmoid(2u)
    z = GELU_K2 * (x + GELU_C * x * x * x)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-z))


def gelu_bwd_np(x, g):
    z = GELU_K2 * (x + GELU_C * x * x * x)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return g * (s + x * s * (1.0 - s) * GELU_K2 * (1.0 + 3.0 * GELU_C * x * x))


def softmax_fwd_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def bias_scatter_np(g, idx, n_rel):
    """Accumulate ``g[b, h, i, j]`` into ``out[h, idx[b, i, j]]``.

    ``idx`` is either (n, n), shared by the batch, or (B, n, n).
    """
    heads = g.shape[1]
    gh = np.moveaxis(g, 1, 0).reshape(heads, -1)
    flat = np.broadcast_to(idx, (g.shape[0],) + g.shape[2:]).reshape(-1)
    out = np.empty((heads, n_rel), dtype=g.dtype)
    for h in range(heads):
        out[h] = np.bincount(flat, weights=gh[h], minlength=n_rel)
    return out


# --------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @numba.njit(cache=True)
    def layer_norm_fwd_nb(x, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += x[r, c]
            mu = s / cols
            v = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                v += d * d
            inv = 1.0 / math.sqrt(v / cols + eps)
            rstd[r] = inv
            for c in range(cols):
                y[r, c] = (x[r, c] - mu) * inv
        return y, rstd

    @numba.njit(cache=True)
    def layer_norm_bwd_nb(g, y, rstd):
        rows, cols = g.shape
        dx = np.empty_like(g)
        for r in range(rows):
            sg = 0.0
            sgy = 0.0
            for c in range(cols):
                sg += g[r, c]
                sgy += g[r, c] * y[r, c]
            mg = sg / cols
            mgy = sgy / cols
            for c in range(cols):
                dx[r, c] = (g[r, c] - mg - y[r, c] * mgy) * rstd[r]
        return dx

    # approximate exp and no zero-division checks let LLVM vectorize; NaN and inf still propagate
    @numba.njit(cache=True, fastmath={"afn", "contract", "arcp"}, error_model="numpy")
    def _gelu_fwd_flat(x, k2, c, one):
        y = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            y[i] = v / (one + math.exp(-k2 * (v + c * v * v * v)))
        return y

    @numba.njit(cache=True, fastmath={"afn", "contract", "arcp"}, error_model="numpy")
    def _gelu_bwd_flat(x, g, k2, c, one, three):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            s = one / (one + math.exp(-k2 * (v + c * v * v * v)))
            out[i] = g[i] * (s + v * s * (one - s) * k2 * (one + three * c * v * v))
        return out

    def gelu_fwd_nb(x):
        f = x.dtype.type
        flat = np.ascontiguousarray(x).reshape(-1)
        return _gelu_fwd_flat(flat, f(GELU_K2), f(GELU_C), f(1.0)).reshape(x.shape)

    def gelu_bwd_nb(x, g):
        f = x.dtype.type
        flat_x = np.ascontiguousarray(x).reshape(-1)
        flat_g = np.ascontiguousarray(g, dtype=x.dtype).reshape(-1)
        return _gelu_bwd_flat(flat_x, flat_g, f(GELU_K2), f(GELU_C), f(1.0), f(3.0)).reshape(x.shape)

    @numba.njit(cache=True)
    def softmax_fwd_nb(x):
        rows, cols = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                e = math.exp(x[r, c] - m)
                y[r, c] = e
                s += e
            inv = 1.0 / s
            for c in range(cols):
                y[r, c] *= inv
        return y

    @numba.njit(cache=True)
    def softmax_bwd_nb(y, g):
        rows, cols = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += g[r, c] * y[r, c]
            for c in range(cols):
                dx[r, c] = y[r, c] * (g[r, c] - s)
        return dx

    @numba.njit(cache=True)
    def _bias_scatter_shared(g, idx, n_rel):
        b_, heads, n, _ = g.shape
        out = np.zeros((heads, n_rel), dtype=g.dtype)
        for b in range(b_):
            for h in range(heads):
                for i in range(n):
                    for j in range(n):
                        out[h, idx[i, j]] += g[b, h, i, j]
        return out

    @numba.njit(cache=True)
    def _bias_scatter_batched(g, idx, n_rel):
        b_, heads, n, _ = g.shape
        out = np.zeros((heads, n_rel), dtype=g.dtype)
        for b in range(b_):
            for h in range(heads):
                for i in range(n):
                    for j in range(n):
                        out[h, idx[b, i, j]] += g[b, h, i, j]
        return out

    def bias_scatter_nb(g, idx, n_rel):
        g = np.ascontiguousarray(g)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.ndim == 2:
            return _bias_scatter_shared(g, idx, n_rel)
        return _bias_scatter_batched(g, idx, n_rel)


def _select(use_numba: bool) -> dict:
    if use_numba:
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return {
            "layer_norm_fwd": layer_norm_fwd_nb,
            "layer_norm_bwd": layer_norm_bwd_nb,
            "gelu_fwd": gelu_fwd_nb,
            "gelu_bwd": gelu_bwd_nb,
            "softmax_fwd": softmax_fwd_nb,
            "softmax_bwd": softmax_bwd_nb,
            "bias_scatter": bias_scatter_nb,
        }
    return {
        "layer_norm_fwd": layer_norm_fwd_np,
        "layer_norm_bwd": layer_norm_bwd_np,
        "gelu_fwd": gelu_fwd_np,
        "gelu_bwd": gelu_bwd_np,
        "softmax_fwd": softmax_fwd_np,
        "softmax_bwd": softmax_bwd_np,
        "bias_scatter": bias_scatter_np,
    }


_ACTIVE = _select(USE_NUMBA)


def backend() -> str:
    return "numba" if _ACTIVE["gelu_fwd"] is not gelu_fwd_np else "numpy"


def set_backend(name: str) -> None:
    """Switch kernels at runtime ("numba" or "numpy"); used by tests and benchmarks."""
    global _ACTIVE
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    _ACTIVE = _select(name == "numba")


def layer_norm_fwd(x, eps):
    """Normalize over the last axis. Returns (y, rstd) with rstd shaped x.shape[:-1]."""
    shape = x.shape
    y, rstd = _ACTIVE["layer_norm_fwd"](np.ascontiguousarray(x).reshape(-1, shape[-1]), eps)
    return y.reshape(shape), rstd.reshape(shape[:-1])


def layer_norm_bwd(g, y, rstd):
    shape = g.shape
    c = shape[-1]
    dx = _ACTIVE["layer_norm_bwd"](
        np.ascontiguousarray(g).reshape(-1, c), np.ascontiguousarray(y).reshape(-1, c), np.ascontiguousarray(rstd).reshape(-1)
    )
    return dx.reshape(shape)


def gelu_fwd(x):
    return _ACTIVE["gelu_fwd"](x)


def gelu_bwd(x, g):
    return _ACTIVE["gelu_bwd"](x, g)


def softmax_fwd(x):
    shape = x.shape
    return _ACTIVE["softmax_fwd"](np.ascontiguousarray(x).reshape(-1, shape[-1])).reshape(shape)


def softmax_bwd(y, g):
    shape = y.shape
    c = shape[-1]
    return _ACTIVE["softmax_bwd"](np.ascontiguousarray(y).reshape(-1, c), np.ascontiguousarray(g).reshape(-1, c)).reshape(shape)


def bias_scatter(g, idx, n_rel):
    return _ACTIVE["bias_scatter"](g, idx, n_rel)
