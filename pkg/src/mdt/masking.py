"""Patchify/unpatchify, random token masks, and the masked shortcut."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class TokenGridGeometry:
    c: int
    h: int
    w: int
    p: int

    def __post_init__(self):
        if self.p < 1 or self.h % self.p or self.w % self.p:
            raise MaskError(f"patch size {self.p} must divide latent extents {self.h}x{self.w}")

    @property
    def gh(self) -> int:
        return self.h // self.p

    @property
    def gw(self) -> int:
        return self.w // self.p

    @property
    def n_tokens(self) -> int:
        return self.gh * self.gw

    @property
    def token_dim(self) -> int:
        return self.c * self.p * self.p


def patchify(z, p: int):
    """(…, c, h, w) latent -> (…, N, c*p*p) tokens plus geometry.

    Token k holds the patch at grid row k // gw, column k % gw; features are
    flattened channel-major, then patch row, then patch column. Accepts a
    numpy array or a Tensor (differentiable).
    """
    shape = z.shape
    c, h, w = shape[-3:]
    geo = TokenGridGeometry(c, h, w, p)
    lead = tuple(shape[:-3])
    L = len(lead)
    split = lead + (c, geo.gh, p, geo.gw, p)
    perm = tuple(range(L)) + (L + 1, L + 3, L, L + 2, L + 4)
    out = lead + (geo.n_tokens, geo.token_dim)
    if isinstance(z, nx.Tensor):
        return nx.reshape(nx.transpose(nx.reshape(z, split), perm), out), geo
    return np.asarray(z).reshape(split).transpose(perm).reshape(out), geo


def unpatchify(tokens, geo: TokenGridGeometry, channels: int | None = None):
    """Inverse of :func:`patchify`; ``channels`` overrides c for multi-head outputs."""
    c = geo.c if channels is None else channels
    shape = tokens.shape
    if shape[-2] != geo.n_tokens or shape[-1] != c * geo.p * geo.p:
        raise MaskError(f"tokens {shape} do not match geometry {geo} with {c} channels")
    lead = tuple(shape[:-2])
    L = len(lead)
    p = geo.p
    split = lead + (geo.gh, geo.gw, c, p, p)
    perm = tuple(range(L)) + (L + 2, L, L + 3, L + 1, L + 4)
    out = lead + (c, geo.h, geo.w)
    if isinstance(tokens, nx.Tensor):
        return nx.reshape(nx.transpose(nx.reshape(tokens, split), perm), out)
    return np.asarray(tokens).reshape(split).transpose(perm).reshape(out)


def masked_count(n: int, rho: float) -> int:
    """round_half_up(rho * n), robust to binary representation of rho."""
    # rho*n is compared at 1e-9 slack so 0.3*256 = 76.8 and 0.5*5 = 2.5 round as written
    x = rho * n
    return int(np.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class MaskSpec:
    """Per-sample masks; ``M`` is (B, N) with 1 = masked, ``kept`` is (B, N_kept) ascending."""

    M: np.ndarray
    kept: np.ndarray
    rho: float

    @property
    def n_tokens(self) -> int:
        return self.M.shape[-1]

    @property
    def n_masked(self) -> int:
        return self.n_tokens - self.kept.shape[-1]


def sample_mask(n: int, rho: float, rng: np.random.Generator, batch: int | None = None) -> MaskSpec:
    """Uniformly random masks with exactly round_half_up(rho*n) masked tokens.

    With ``batch`` set, one independent mask is drawn per sample.
    """
    if not 0 <= rho < 1:
        raise MaskError(f"mask ratio must lie in [0, 1), got {rho}")
    k = masked_count(n, rho)
    rows = 1 if batch is None else batch
    M = np.zeros((rows, n), dtype=np.int8)
    kept = np.empty((rows, n - k), dtype=np.int64)
    for b in range(rows):
        perm = rng.permutation(n)
        M[b, perm[:k]] = 1
        kept[b] = np.sort(perm[k:])
    if batch is None:
        return MaskSpec(M[0], kept[0], rho)
    return MaskSpec(M, kept, rho)


def full_mask(n: int, batch: int | None = None) -> MaskSpec:
    """The rho=0 mask (nothing masked) without consuming randomness."""
    if batch is None:
        return MaskSpec(np.zeros(n, dtype=np.int8), np.arange(n), 0.0)
    return MaskSpec(np.zeros((batch, n), dtype=np.int8), np.tile(np.arange(n), (batch, 1)), 0.0)


def sample_mask_ratio(lo: float, hi: float, rng: np.random.Generator) -> float:
    if not 0 <= lo <= hi < 1:
        raise MaskError(f"mask ratio range must satisfy 0 <= lo <= hi < 1, got [{lo}, {hi}]")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def apply_mask(tokens, mask: MaskSpec):
    """Keep the unmasked rows of (…, N, d) tokens, order preserved."""
    if tokens.shape[-2] != mask.n_tokens:
        raise MaskError(f"{tokens.shape[-2]} tokens but mask covers {mask.n_tokens}")
    if isinstance(tokens, nx.Tensor):
        return nx.gather_rows(tokens, mask.kept)
    tokens = np.asarray(tokens)
    if mask.kept.ndim == 1:
        return np.take(tokens, mask.kept, axis=-2)
    return np.take_along_axis(tokens, mask.kept[..., None], axis=-2)


def masked_shortcut(q, k_hat, M):
    """(1 - M) * q + M * k_hat row-wise; M broadcasts over the feature axis."""
    if q.shape != k_hat.shape:
        raise nx.ShapeError("masked_shortcut", q.shape, k_hat.shape)
    m = np.asarray(M)[..., None]
    if m.shape[:-1] != tuple(q.shape[:-1])[-m.ndim + 1:]:
        raise nx.ShapeError("masked_shortcut", q.shape, np.shape(M))
    if isinstance(q, nx.Tensor) or isinstance(k_hat, nx.Tensor):
        q = q if isinstance(q, nx.Tensor) else nx.Tensor(q)
        mf = m.astype(q.dtype)
        return nx.add(nx.mul(q, 1 - mf), nx.mul(k_hat, mf))
    q = np.asarray(q)
    return np.where(m.astype(bool), np.asarray(k_hat), q)
