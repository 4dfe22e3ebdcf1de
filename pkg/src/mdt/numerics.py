"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive computes its forward value eagerly. When a :class:`Tape` is
active and an input requires gradients, the primitive appends a backward
closure to the tape; ``Tape.gradient`` replays those closures in reverse
order. Outside a tape nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, a, b):
        self.primitive = primitive
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{primitive}: incompatible shapes {tuple(a)} and {tuple(b)}")


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# tape

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager around a forward pass, then call
    :meth:`gradient` once.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def gradient(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for each named parameter.

        Parameters that did not take part in the forward pass get exact zeros.
        """
        if loss.data.size != 1:
            raise ShapeError("gradient", loss.shape, ())
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss {float(loss.data)}")
        for p in params.values():
            p.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, parents, back in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = back(g)
            for p, gp in zip(parents, grads):
                if gp is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
            out.grad = None
        result = {}
        for name, p in params.items():
            result[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.grad = None
        loss.grad = None
        self.nodes.clear()
        if self.check_finite:
            for name, g in result.items():
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for parameter {name!r}")
        return result


def _tape_for(*inputs) -> Tape | None:
    if not _TAPES:
        return None
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            return _TAPES[-1]
    return None


def _emit(data, parents: tuple, back: Callable) -> Tensor:
    tape = _tape_for(*parents)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append((out, parents, back))
    return out


def _lift(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a.data)
    b = _lift(b)
    return _lift(a, b.data), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient passes where ``a > floor``."""
    ad = a.data
    keep = ad > floor
    return _emit(np.where(keep, ad, floor).astype(ad.dtype), (a,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)),
    )


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    ad = a.data
    return _emit(kernels.gelu_fwd(ad), (a,), lambda g: (kernels.gelu_bwd(ad, g),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _emit(ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k, m = bd.shape

        def back(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb

    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError("matmul", a.shape, b.shape)

        def back(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _emit(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    k, m = wd.shape
    out = xd @ wd
    if b is not None:
        if b.shape != (m,):
            raise ShapeError("linear", w.shape, b.shape)
        out = out + b.data

    def back(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, m)
        gw = xd.reshape(-1, k).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise ShapeError("broadcast_to", src, tuple(shape)) from None
    return _emit(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError("split", a.shape, tuple(sizes))
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    pieces = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(lo, hi)
        sl = tuple(sl)

        def back(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        pieces.append(_emit(a.data[sl], (a,), back))
    return pieces


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather entries along ``axis`` by an integer index array (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise ShapeError("take", a.shape, idx.shape)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _emit(np.take(a.data, idx, axis=ax), (a,), back)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` (..., N, d) at ``idx``: (n,) shared, or (..., n) per leading index.

    Indices within one row-list must be distinct.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError("gather_rows", x.shape, idx.shape)
    if idx.ndim == 1:
        out = np.take(x.data, idx, axis=-2)
    else:
        if idx.shape[:-1] != x.shape[:-2]:
            raise ShapeError("gather_rows", x.shape, idx.shape)
        out = np.take_along_axis(x.data, idx[..., None], axis=-2)
    shape = x.shape
    return _emit(out, (x,), lambda g: (_scatter(g, idx, shape),))


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of ``x`` (..., n, d) at ``idx`` inside zeros of shape (..., n_rows, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[-1] != x.shape[-2] or (idx.size and (idx.min() < 0 or idx.max() >= n_rows)):
        raise ShapeError("scatter_rows", x.shape, idx.shape)
    shape = x.shape[:-2] + (n_rows, x.shape[-1])
    out = _scatter(x.data, idx, shape)
    if idx.ndim == 1:
        return _emit(out, (x,), lambda g: (np.take(g, idx, axis=-2),))
    return _emit(out, (x,), lambda g: (np.take_along_axis(g, idx[..., None], axis=-2),))


def _scatter(rows: np.ndarray, idx: np.ndarray, shape: tuple) -> np.ndarray:
    full = np.zeros(shape, dtype=rows.dtype)
    if idx.ndim == 1:
        full[..., idx, :] = rows
    else:
        np.put_along_axis(full, idx[..., None], rows, axis=-2)
    return full


def rel_bias(table: Tensor, idx) -> Tensor:
    """Per-head bias matrices gathered from ``table`` (heads, R).

    ``idx`` is (n, n) giving (1, heads, n, n), or (B, n, n) giving (B, heads, n, n).
    """
    idx = np.asarray(idx, dtype=np.int64)
    heads, n_rel = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n_rel):
        raise ShapeError("rel_bias", table.shape, idx.shape)
    out = table.data[:, idx]
    out = out[None] if idx.ndim == 2 else np.moveaxis(out, 0, 1)
    return _emit(out, (table,), lambda g: (kernels.bias_scatter(g, idx, n_rel),))


# --------------------------------------------------------------------------
# normalisation and reductions


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    out = kernels.softmax_fwd(a.data)
    return _emit(out, (a,), lambda g: (kernels.softmax_bwd(out, g),))


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the last axis with optional learnable scale and shift."""
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", x.shape, p.shape)
    y, rstd = kernels.layer_norm_fwd(x.data, eps)
    out = y
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    wd = weight.data if weight is not None else None

    def back(g):
        gy = g * wd if wd is not None else g
        gx = kernels.layer_norm_bwd(gy, y, rstd) if x.requires_grad else None
        grads = [gx]
        if weight is not None:
            grads.append((g * y).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    parents = tuple(p for p in (x, weight, bias) if p is not None)
    return _emit(out, parents, back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "square": square,
    "maximum": maximum,
    "where": where,
    "matmul": matmul,
    "linear": linear,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "split": split,
    "take": take,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "rel_bias": rel_bias,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "silu": silu,
    "sum": reduce_sum,
    "mean": reduce_mean,
}


def primitive_set() -> dict[str, str]:
    """Name -> one-line description of every differentiable primitive."""
    return {name: (fn.__doc__ or name).strip().splitlines()[0] for name, fn in PRIMITIVES.items()}


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, int] | None
    n_coords: int
    names_checked: set

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    n_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients against central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Every parameter contributes at least one coordinate when ``n_coords`` is
    at least the parameter count; ``None`` checks every coordinate.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-5, 1e-3]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name!r} is {p.dtype}")

    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {float(loss.data)}")
    analytic = tape.gradient(loss, params)
    for name, g in analytic.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    coords = _sample_coords(params, n_coords, seed)
    worst, max_err = None, 0.0
    for name, flat in coords:
        arr = params[name].data.reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        fp = float(f(params).data)
        arr[flat] = orig - h
        fm = float(f(params).data)
        arr[flat] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss while perturbing {name!r}[{flat}]")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[name].reshape(-1)[flat] - numeric) / max(1.0, abs(numeric))
        if err > max_err or worst is None:
            max_err, worst = err, (name, flat)
    return GradCheckResult(max_err, worst, len(coords), {n for n, _ in coords})


def _sample_coords(params: dict[str, Tensor], n_coords: int | None, seed: int) -> list[tuple[str, int]]:
    names = sorted(params)
    if n_coords is None:
        return [(n, i) for n in names for i in range(params[n].data.size)]
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(names)))
    picked = [(names[k], int(rng.integers(params[names[k]].data.size))) for k in order[:n_coords]]
    sizes = np.array([params[n].data.size for n in names], dtype=float)
    while len(picked) < n_coords:
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        picked.append((names[k], int(rng.integers(params[names[k]].data.size))))
    return picked


# --------------------------------------------------------------------------
# deterministic random streams


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream name)."""
    key = (int(seed) & (2**64 - 1)) | (zlib.crc32(stream.encode()) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def rng_state(gen: np.random.Generator) -> dict:
    return _to_json(gen.bit_generator.state)


def set_rng_state(gen: np.random.Generator, state: dict) -> None:
    st = json.loads(json.dumps(state))
    inner = st["state"]
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    gen.bit_generator.state = st


def _to_json(obj):
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def tree_map(fn: Callable, *trees: dict) -> dict:
    return {k: fn(*(t[k] for t in trees)) for k in trees[0]}


def check_finite(arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    for name, a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite values in {name!r}")
