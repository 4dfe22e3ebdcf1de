"""Asymmetric masked diffusion transformer.

Parameters live in a flat ``dict[str, Tensor]`` whose names and shapes
depend only on :class:`ModelConfig`. The forward passes are plain functions
over that dict so the same code serves training (under a tape), inference,
and finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .masking import MaskSpec, TokenGridGeometry, masked_shortcut, patchify, unpatchify

MODES = ("train-masked", "train-full", "inference")
VARIANTS = ("v1", "v2", "dit")

# size -> (total blocks, width, heads)
PRESETS = {
    "toy": (8, 64, 4),
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "XL": (28, 1152, 16),
}
V2_DECODER_BLOCKS = {"toy": 4, "S": 6, "B": 4, "XL": 4}


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    """A forward entry point was used in a mode it does not support."""


@dataclass(frozen=True)
class ModelConfig:
    size: str = "toy"
    variant: str = "v1"
    depth: int = 8
    n2: int = 2
    dim: int = 64
    heads: int = 4
    patch: int = 2
    in_channels: int = 2
    input_size: int = 8
    classes: int = 2
    learn_sigma: bool = False
    rel_bias: bool = True
    learn_pos: bool = True
    side_interp: bool = True
    mlp_ratio: int = 4
    freq_dim: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant == "dit":
            if self.depth < 1:
                raise ConfigError("depth must be positive")
        else:
            # n2 is also the side-interpolater position: it sits before the last n2 blocks
            # (v1 allows 0, the interpolater feeding the output head directly)
            min_n2 = 1 if self.variant == "v2" else 0
            if self.n2 < min_n2 or self.n1 < 2:
                raise ConfigError(f"need N1 >= 2 and N2 >= {min_n2}, got N1={self.n1}, N2={self.n2}")
            if self.variant == "v2" and self.n1 % 2:
                raise ConfigError(f"v2 long-shortcuts need an even encoder depth, got N1={self.n1}")
        if self.input_size % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide input size {self.input_size}")

    @property
    def n1(self) -> int:
        return self.depth if self.variant == "dit" else self.depth - self.n2

    @property
    def geometry(self) -> TokenGridGeometry:
        return TokenGridGeometry(self.in_channels, self.input_size, self.input_size, self.patch)

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learn_sigma else self.in_channels

    @property
    def n_rel(self) -> int:
        g = self.geometry
        return (2 * g.gh - 1) * (2 * g.gw - 1)


def model_config(size: str = "toy", variant: str = "v1", **overrides) -> ModelConfig:
    """Preset lookup; ``n2`` defaults to 2 for v1 and the size's v2 value for v2."""
    if size not in PRESETS:
        raise ConfigError(f"unknown size {size!r}; choose from {sorted(PRESETS)}")
    depth, dim, heads = PRESETS[size]
    n2 = V2_DECODER_BLOCKS[size] if variant == "v2" else 2
    if variant == "dit":
        n2 = 0
    base = dict(size=size, variant=variant, depth=depth, dim=dim, heads=heads, n2=n2)
    if size != "toy":
        base.update(in_channels=4, input_size=32, classes=1000)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# parameters


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, gh: int, gw: int) -> np.ndarray:
    """Fixed 2-D sin-cos position table (N, dim), rows in token order."""
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    half = dim // 2
    return np.concatenate([_sincos_1d(half, rows), _sincos_1d(dim - half, cols)], axis=1)


def block_names(cfg: ModelConfig) -> list[str]:
    names = [f"enc.{i}" for i in range(1, cfg.n1 + 1)]
    if cfg.variant != "dit":
        names += [f"dec.{j}" for j in range(1, cfg.n2 + 1)]
        names.append("si")
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, g = cfg.dim, cfg.geometry
    hid = cfg.mlp_ratio * d
    shapes: dict[str, tuple] = {
        "x_embed.w": (g.token_dim, d),
        "x_embed.b": (d,),
    }
    if cfg.learn_pos:
        shapes["pos_embed"] = (g.n_tokens, d)
    if cfg.variant != "dit":
        shapes["dec_pos_embed"] = (g.n_tokens, d)
        shapes["mask_token"] = (d,)
    shapes.update(
        {
            "t_embed.fc1.w": (cfg.freq_dim, d),
            "t_embed.fc1.b": (d,),
            "t_embed.fc2.w": (d, d),
            "t_embed.fc2.b": (d,),
            "y_embed": (cfg.classes + 1, d),
        }
    )
    for name in block_names(cfg):
        shapes.update(
            {
                f"{name}.ada.w": (d, 6 * d),
                f"{name}.ada.b": (6 * d,),
                f"{name}.qkv.w": (d, 3 * d),
                f"{name}.qkv.b": (3 * d,),
                f"{name}.proj.w": (d, d),
                f"{name}.proj.b": (d,),
                f"{name}.fc1.w": (d, hid),
                f"{name}.fc1.b": (hid,),
                f"{name}.fc2.w": (hid, d),
                f"{name}.fc2.b": (d,),
            }
        )
        if cfg.rel_bias and name != "si":
            shapes[f"{name}.rel_bias"] = (cfg.heads, cfg.n_rel)
    if cfg.variant == "v2":
        for i in range(cfg.n1 // 2 + 1, cfg.n1 + 1):
            shapes[f"enc.{i}.skip.w"] = (2 * d, d)
            shapes[f"enc.{i}.skip.b"] = (d,)
        for j in range(1, cfg.n2 + 1):
            shapes[f"dec.{j}.dense.w"] = (2 * d, d)
            shapes[f"dec.{j}.dense.b"] = (d,)
    shapes.update(
        {
            "final.ada.w": (d, 2 * d),
            "final.ada.b": (2 * d,),
            "final.w": (d, cfg.patch * cfg.patch * cfg.out_channels),
            "final.b": (cfg.patch * cfg.patch * cfg.out_channels,),
        }
    )
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, nx.Tensor]:
    rng = nx.make_rng(seed, "init")
    g = cfg.geometry
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("pos_embed", "dec_pos_embed"):
            arr = sincos_2d(cfg.dim, g.gh, g.gw)
        elif leaf == "b":
            arr = np.zeros(shape)
        elif name.endswith(("ada.w", "rel_bias")) or name in ("final.w", "mask_token", "y_embed", "t_embed.fc1.w"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            # xavier-uniform on (fan_in, fan_out)
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = nx.parameter(np.asarray(arr, dtype=dtype), name=name)
    return params


def cast_params(params: dict[str, nx.Tensor], dtype) -> dict[str, nx.Tensor]:
    return {k: nx.parameter(v.data.astype(dtype), name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# embeddings


def embed_tokens(raw, params: dict, cfg: ModelConfig) -> nx.Tensor:
    """Linear patch projection plus the global position embedding."""
    g = cfg.geometry
    if raw.shape[-2:] != (g.n_tokens, g.token_dim):
        raise nx.ShapeError("embed_tokens", raw.shape, (g.n_tokens, g.token_dim))
    x = raw if isinstance(raw, nx.Tensor) else nx.Tensor(np.asarray(raw, dtype=params["x_embed.w"].dtype))
    h = nx.linear(x, params["x_embed.w"], params["x_embed.b"])
    return nx.add(h, _global_pos(params, cfg))


def _global_pos(params: dict, cfg: ModelConfig):
    if cfg.learn_pos:
        return params["pos_embed"]
    g = cfg.geometry
    return nx.Tensor(_fixed_pos(cfg.dim, g.gh, g.gw).astype(params["x_embed.w"].dtype))


@lru_cache(maxsize=16)
def _fixed_pos(dim: int, gh: int, gw: int) -> np.ndarray:
    return sincos_2d(dim, gh, gw)


def timestep_features(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features [cos(t f_k), sin(t f_k)] with geometric frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def condition_vector(t, labels, params: dict, cfg: ModelConfig) -> nx.Tensor:
    """Timestep MLP embedding plus label-table row; label ``cfg.classes`` is null."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() > cfg.classes):
        raise ConfigError(f"labels must lie in [0, {cfg.classes}], got {labels}")
    dtype = params["t_embed.fc1.w"].dtype
    feats = nx.Tensor(timestep_features(t, cfg.freq_dim).astype(dtype))
    h = nx.silu(nx.linear(feats, params["t_embed.fc1.w"], params["t_embed.fc1.b"]))
    h = nx.linear(h, params["t_embed.fc2.w"], params["t_embed.fc2.b"])
    return nx.add(h, nx.take(params["y_embed"], labels, axis=0))


# --------------------------------------------------------------------------
# relative positional bias


@lru_cache(maxsize=16)
def relative_index(gh: int, gw: int) -> np.ndarray:
    """(N, N) table offsets: (dr + gh - 1) * (2 gw - 1) + (dc + gw - 1), d = pos_i - pos_j."""
    r, c = np.divmod(np.arange(gh * gw), gw)
    dr = r[:, None] - r[None, :] + gh - 1
    dc = c[:, None] - c[None, :] + gw - 1
    idx = dr * (2 * gw - 1) + dc
    idx.setflags(write=False)
    return idx


def relative_bias_submatrix(table, geo: TokenGridGeometry, positions=None):
    """Bias for the given token positions.

    ``positions`` None means the full grid. A 1-D list yields
    (1, heads, n, n); a (B, n) array yields (B, heads, n, n).
    """
    full = relative_index(geo.gh, geo.gw)
    if positions is None:
        idx = full
    else:
        pos = np.asarray(positions, dtype=np.int64)
        if pos.ndim == 1:
            idx = full[pos[:, None], pos[None, :]]
        else:
            idx = np.take_along_axis(full[pos], pos[:, None, :], axis=2)
    tab = table if isinstance(table, nx.Tensor) else nx.Tensor(np.asarray(table))
    return nx.rel_bias(tab, idx)


# --------------------------------------------------------------------------
# blocks


def attention_with_bias(x: nx.Tensor, bias, params: dict, prefix: str, heads: int) -> nx.Tensor:
    """Multi-head self-attention: softmax(q k^T / sqrt(d_k) + bias) v."""
    B, n, d = x.shape
    dh = d // heads
    if bias is not None and (bias.shape[-1] != n or bias.shape[-2] != n or bias.shape[-3] != heads):
        raise nx.ShapeError("attention_with_bias", x.shape, bias.shape)
    qkv = nx.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = nx.transpose(nx.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (nx.reshape(p, (B, heads, n, dh)) for p in nx.split(qkv, [1, 1, 1], axis=0))
    q = nx.mul(q, 1.0 / math.sqrt(dh))
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2)))
    if bias is not None:
        scores = nx.add(scores, bias)
    attn = nx.softmax(scores)
    out = nx.matmul(attn, v)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, n, d))
    return nx.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def _modulate(x: nx.Tensor, shift: nx.Tensor, scale: nx.Tensor) -> nx.Tensor:
    return nx.add(nx.mul(x, nx.add(scale, 1.0)), shift)


def block_forward(x: nx.Tensor, c_act: nx.Tensor, params: dict, prefix: str, cfg: ModelConfig, bias=None) -> nx.Tensor:
    """Pre-norm attention + MLP block with adaptive layer-norm modulation."""
    B, d = c_act.shape
    mod = nx.linear(c_act, params[f"{prefix}.ada.w"], params[f"{prefix}.ada.b"])
    mod = nx.reshape(mod, (B, 1, 6 * d))
    sh_a, sc_a, g_a, sh_m, sc_m, g_m = nx.split(mod, [d] * 6, axis=-1)
    h = _modulate(nx.layer_norm(x), sh_a, sc_a)
    x = nx.add(x, nx.mul(g_a, attention_with_bias(h, bias, params, prefix, cfg.heads)))
    h = _modulate(nx.layer_norm(x), sh_m, sc_m)
    h = nx.gelu(nx.linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    h = nx.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])
    return nx.add(x, nx.mul(g_m, h))


def _block_bias(params: dict, prefix: str, cfg: ModelConfig, positions):
    if not cfg.rel_bias:
        return None
    return relative_bias_submatrix(params[f"{prefix}.rel_bias"], cfg.geometry, positions)


def long_shortcut_sources(n1: int) -> dict[int, int | None]:
    """Encoder block (1-based) -> index of the earlier block whose output is concatenated in."""
    return {i: (n1 - i + 1 if i > n1 / 2 else None) for i in range(1, n1 + 1)}


def encoder_forward(x: nx.Tensor, c_act: nx.Tensor, params: dict, cfg: ModelConfig, positions=None, trace=None) -> nx.Tensor:
    """Run the N1 encoder blocks on full (positions=None) or kept tokens.

    In v2, blocks past the midpoint take the previous output concatenated
    with a mirrored earlier output, fused back to width d.
    """
    sources = long_shortcut_sources(cfg.n1) if cfg.variant == "v2" else {}
    outputs: dict[int, nx.Tensor] = {}
    h = x
    for i in range(1, cfg.n1 + 1):
        prefix = f"enc.{i}"
        src = sources.get(i)
        if src is not None:
            inp = nx.linear(nx.concat([h, outputs[src]], axis=-1), params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"])
        else:
            inp = h
        if trace is not None:
            trace.append((prefix, i - 1, src))
        h = block_forward(inp, c_act, params, prefix, cfg, _block_bias(params, prefix, cfg, positions))
        outputs[i] = h
    return h


def _mask_matrix(mask: MaskSpec, batch: int) -> np.ndarray:
    M = np.asarray(mask.M)
    if M.ndim == 1:
        M = np.broadcast_to(M, (batch, M.shape[0]))
    return M


def side_interpolater(
    enc_out: nx.Tensor, mask: MaskSpec, c_act: nx.Tensor, params: dict, cfg: ModelConfig, mode: str = "train-masked"
) -> nx.Tensor:
    """Fill masked slots with the mask token, add position embedding, predict, and merge.

    Returns (1 - M) * q + M * block(q).
    """
    if mode != "train-masked":
        raise ContractError(f"side-interpolater only runs in train-masked mode, not {mode!r}")
    if cfg.variant == "dit":
        raise ContractError("plain (dit) variant has no side-interpolater")
    B = enc_out.shape[0]
    N = cfg.geometry.n_tokens
    M = _mask_matrix(mask, B)
    kept = mask.kept if mask.kept.ndim == 2 else np.broadcast_to(mask.kept, (B, mask.kept.shape[0]))
    dtype = enc_out.dtype
    filled = nx.scatter_rows(enc_out, kept, N)
    fill = nx.mul(nx.Tensor(M[..., None].astype(dtype)), params["mask_token"])
    q = nx.add(nx.add(filled, fill), params["dec_pos_embed"])
    if not cfg.side_interp:
        return q
    k_hat = block_forward(q, c_act, params, "si", cfg, None)
    return masked_shortcut(q, k_hat, M)


def decoder_forward(tokens: nx.Tensor, u: nx.Tensor, c_act: nx.Tensor, params: dict, cfg: ModelConfig, trace=None) -> nx.Tensor:
    """N2 decoder blocks (v2: each input fused with the embedded noisy tokens u)."""
    h = tokens
    for j in range(1, cfg.n2 + 1):
        prefix = f"dec.{j}"
        if cfg.variant == "v2":
            inp = nx.linear(nx.concat([h, u], axis=-1), params[f"{prefix}.dense.w"], params[f"{prefix}.dense.b"])
        else:
            inp = h
        if trace is not None:
            trace.append((prefix, j - 1, "u" if cfg.variant == "v2" else None))
        h = block_forward(inp, c_act, params, prefix, cfg, _block_bias(params, prefix, cfg, None))
    return h


def final_layer(x: nx.Tensor, c_act: nx.Tensor, params: dict, cfg: ModelConfig) -> nx.Tensor:
    B, d = c_act.shape
    mod = nx.reshape(nx.linear(c_act, params["final.ada.w"], params["final.ada.b"]), (B, 1, 2 * d))
    shift, scale = nx.split(mod, [d, d], axis=-1)
    h = _modulate(nx.layer_norm(x), shift, scale)
    return nx.linear(h, params["final.w"], params["final.b"])


@dataclass
class ForwardAux:
    u: nx.Tensor | None = None
    encoder_out: nx.Tensor | None = None
    decoder_input: nx.Tensor | None = None
    trace: list = field(default_factory=list)


def model_forward(
    x_t,
    t,
    labels,
    params: dict,
    cfg: ModelConfig,
    mode: str = "inference",
    mask: MaskSpec | None = None,
    aux: ForwardAux | None = None,
) -> nx.Tensor:
    """Predict per-pixel epsilon (plus variance logits when learn_sigma) for a batch of latents.

    ``x_t`` is (B, c, h, w); the result has ``cfg.out_channels`` channels.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if (mask is not None) != (mode == "train-masked"):
        raise ContractError("a mask is required in train-masked mode and forbidden otherwise")
    if mode == "train-masked" and cfg.variant == "dit":
        raise ContractError("plain (dit) variant cannot run the masked path")
    dtype = params["x_embed.w"].dtype
    x_arr = x_t.data if isinstance(x_t, nx.Tensor) else np.asarray(x_t)
    if x_arr.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise nx.ShapeError("model_forward", x_arr.shape, (cfg.in_channels, cfg.input_size, cfg.input_size))
    raw, geo = patchify(x_arr.astype(dtype, copy=False), cfg.patch)
    u = embed_tokens(raw, params, cfg)
    c_act = nx.silu(condition_vector(t, labels, params, cfg))
    trace = aux.trace if aux is not None else None
    if mode == "train-masked":
        enc = encoder_forward(nx.gather_rows(u, _kept_matrix(mask, u.shape[0])), c_act, params, cfg, _kept_matrix(mask, u.shape[0]), trace)
        dec_in = side_interpolater(enc, mask, c_act, params, cfg, mode)
    else:
        enc = encoder_forward(u, c_act, params, cfg, None, trace)
        dec_in = enc if cfg.variant == "dit" else nx.add(enc, params["dec_pos_embed"])
    out = decoder_forward(dec_in, u, c_act, params, cfg, trace) if cfg.variant != "dit" else dec_in
    tokens = final_layer(out, c_act, params, cfg)
    if aux is not None:
        aux.u, aux.encoder_out, aux.decoder_input = u, enc, dec_in
    return unpatchify(tokens, geo, cfg.out_channels)


def _kept_matrix(mask: MaskSpec, batch: int) -> np.ndarray:
    kept = np.asarray(mask.kept)
    if kept.ndim == 1:
        kept = np.broadcast_to(kept, (batch, kept.shape[0]))
    return kept


def param_count(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
