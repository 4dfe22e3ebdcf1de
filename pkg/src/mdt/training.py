"""Losses, the dual-pass training step, AdamW/Adan, weight EMA and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .masking import full_mask, masked_count, sample_mask, sample_mask_ratio, unpatchify
from .network import ModelConfig, init_params, model_forward
from .schedules import NoiseSchedule, min_snr_weight, posterior_log_var_clipped, posterior_mean_coeffs, q_sample

METRIC_COLUMNS = ("step", "loss_full", "loss_masked", "loss_total", "grad_norm", "lr")
RNG_STREAMS = ("timesteps", "noise", "mask", "dropout")
OPTIMIZER_DEFAULTS = {"adamw": (0.9, 0.999), "adan": (0.98, 0.92, 0.99)}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 64
    lr: float = 1e-4
    optimizer: str = "adamw"
    betas: tuple = ()
    weight_decay: float = 0.0
    eps: float = 1e-8
    ema_decay: float = 0.9999
    label_dropout: float = 0.1
    vlb_lambda: float = 1e-3
    min_snr_gamma: float = 5.0
    mask_lo: float = 0.3
    mask_hi: float = 0.3
    dual_pass: bool = True
    loss_tokens: str = "all"
    grad_clip: float = 0.0
    seed: int = 0
    ckpt_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZER_DEFAULTS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_tokens not in ("all", "masked"):
            raise ValueError(f"loss_tokens must be 'all' or 'masked', got {self.loss_tokens!r}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if not 0 <= self.label_dropout < 1:
            raise ValueError(f"label_dropout must lie in [0, 1), got {self.label_dropout}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not 0 <= self.mask_lo <= self.mask_hi < 1:
            raise ValueError(f"mask ratio range must satisfy 0 <= lo <= hi < 1, got [{self.mask_lo}, {self.mask_hi}]")

    @property
    def resolved_betas(self) -> tuple:
        b = tuple(self.betas) or OPTIMIZER_DEFAULTS[self.optimizer]
        if len(b) != len(OPTIMIZER_DEFAULTS[self.optimizer]):
            raise ValueError(f"{self.optimizer} takes {len(OPTIMIZER_DEFAULTS[self.optimizer])} betas, got {b}")
        return b


# --------------------------------------------------------------------------
# losses


def _per_sample(arr: np.ndarray, ndim: int, dtype) -> np.ndarray:
    return np.asarray(arr, dtype=dtype).reshape((-1,) + (1,) * (ndim - 1))


def token_pixel_mask(M: np.ndarray, cfg: ModelConfig, dtype) -> np.ndarray:
    """Expand a (B, N) token mask to (B, c, h, w) pixels."""
    g = cfg.geometry
    tok = np.repeat(np.asarray(M, dtype=dtype)[..., None], g.token_dim, axis=-1)
    return unpatchify(tok, g)


def _approx_std_normal_cdf(x: nx.Tensor) -> nx.Tensor:
    x3 = nx.mul(nx.square(x), x)
    arg = nx.mul(nx.add(x, nx.mul(x3, 0.044715)), math.sqrt(2.0 / math.pi))
    return nx.mul(nx.add(nx.tanh(arg), 1.0), 0.5)


def discretized_gaussian_nll(x0: np.ndarray, mean: np.ndarray, log_scale: nx.Tensor, bin_half: float = 1.0 / 255) -> nx.Tensor:
    """-log P(x0) under a Gaussian discretized into bins of width 2*bin_half; edge bins open."""
    dtype = log_scale.dtype
    centered = (x0 - mean).astype(dtype)
    inv_std = nx.exp(nx.neg(log_scale))
    cdf_plus = _approx_std_normal_cdf(nx.mul(inv_std, centered + bin_half))
    cdf_min = _approx_std_normal_cdf(nx.mul(inv_std, centered - bin_half))
    log_cdf_plus = nx.log(nx.maximum(cdf_plus, 1e-12))
    log_one_minus_cdf_min = nx.log(nx.maximum(nx.sub(1.0, cdf_min), 1e-12))
    log_delta = nx.log(nx.maximum(nx.sub(cdf_plus, cdf_min), 1e-12))
    inner = nx.where(x0 > 0.999, log_one_minus_cdf_min, log_delta)
    return nx.neg(nx.where(x0 < -0.999, log_cdf_plus, inner))


def vlb_terms(
    eps_hat: np.ndarray, var_out: nx.Tensor, x0: np.ndarray, x_t: np.ndarray, t: np.ndarray, sched: NoiseSchedule
) -> nx.Tensor:
    """Per-sample variational bound term in bits/dim; the mean enters with gradient stopped."""
    dtype = var_out.dtype
    nd = x0.ndim
    log_var_clip = posterior_log_var_clipped(sched)
    c0, ct = posterior_mean_coeffs(sched)
    ab = _per_sample(sched.alpha_bar[t], nd, np.float64)
    pred_x0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    model_mean = _per_sample(c0[t], nd, np.float64) * pred_x0 + _per_sample(ct[t], nd, np.float64) * x_t
    true_mean = _per_sample(c0[t], nd, np.float64) * x0 + _per_sample(ct[t], nd, np.float64) * x_t
    true_log_var = _per_sample(log_var_clip[t], nd, np.float64)
    max_log = _per_sample(np.log(sched.beta[t]), nd, dtype)
    min_log = _per_sample(log_var_clip[t], nd, dtype)
    frac = nx.mul(nx.add(var_out, 1.0), 0.5)
    model_log_var = nx.add(nx.mul(frac, max_log), nx.mul(nx.sub(1.0, frac), min_log))
    # KL(q || p) = 0.5 (-1 + lv_p - lv_q + exp(lv_q - lv_p) + (mu_q - mu_p)^2 exp(-lv_p))
    spread = (np.exp(true_log_var) + (true_mean - model_mean) ** 2).astype(dtype)
    kl = nx.add(
        nx.add(nx.sub(model_log_var, true_log_var.astype(dtype)), -1.0),
        nx.mul(nx.exp(nx.neg(model_log_var)), spread),
    )
    kl = nx.mul(kl, 0.5)
    nll = discretized_gaussian_nll(x0, model_mean, nx.mul(model_log_var, 0.5))
    per_elem = nx.where(np.broadcast_to(_per_sample(t == 1, nd, bool), x0.shape), nll, kl)
    per_sample = nx.reduce_mean(per_elem, axis=tuple(range(1, nd)))
    return nx.mul(per_sample, 1.0 / math.log(2.0))


@dataclass
class LossResult:
    loss: nx.Tensor
    mse: float
    vlb: float
    max_abs_output: float


def diffusion_loss(
    params: dict,
    cfg: ModelConfig,
    sched: NoiseSchedule,
    x0: np.ndarray,
    labels: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    mode: str = "train-full",
    mask=None,
    min_snr_gamma: float = math.inf,
    vlb_lambda: float = 0.0,
    loss_tokens: str = "all",
    eps_fn: Callable | None = None,
) -> LossResult:
    """Min-SNR weighted epsilon-MSE, plus the opt-in learned-variance bound term.

    The MSE is averaged over all tokens; ``loss_tokens="masked"`` restricts it
    to masked tokens of a masked pass (ablation only). ``eps_fn`` replaces the
    network for oracle checks.
    """
    if mode not in ("train-full", "train-masked"):
        raise ValueError(f"training mode must be train-full or train-masked, got {mode!r}")
    dtype = params["x_embed.w"].dtype if params else np.asarray(x0).dtype
    x0 = np.asarray(x0, dtype=dtype)
    eps = np.asarray(eps, dtype=dtype)
    t = sched.check_t(np.asarray(t))
    x_t = q_sample(x0, t, eps, sched)
    if eps_fn is not None:
        out = eps_fn(x_t, t, labels)
        out = out if isinstance(out, nx.Tensor) else nx.Tensor(np.asarray(out, dtype=dtype))
    else:
        out = model_forward(x_t, t, labels, params, cfg, mode, mask)
    c = x0.shape[1]
    if out.shape[1] == 2 * c:
        eps_hat, var_out = nx.split(out, [c, c], axis=1)
    else:
        eps_hat, var_out = out, None
    if math.isinf(min_snr_gamma):
        w = np.ones(len(t))
    else:
        w = min_snr_weight(t, min_snr_gamma, sched)
    sq = nx.square(nx.sub(eps_hat, eps))
    weighted = nx.mul(sq, _per_sample(w, x0.ndim, dtype))
    if loss_tokens == "masked" and mode == "train-masked":
        pm = token_pixel_mask(np.broadcast_to(mask.M, (len(x0), mask.n_tokens)), cfg, dtype)
        denom = float(pm.sum())
        mse = nx.mul(nx.reduce_sum(nx.mul(weighted, pm)), 1.0 / denom) if denom else nx.reduce_sum(nx.mul(weighted, 0.0))
    else:
        mse = nx.reduce_mean(weighted)
    loss, vlb_val = mse, 0.0
    if var_out is not None and vlb_lambda > 0:
        vlb = nx.reduce_mean(vlb_terms(eps_hat.data.astype(np.float64), var_out, x0.astype(np.float64), x_t.astype(np.float64), t, sched))
        loss = nx.add(mse, nx.mul(vlb, vlb_lambda))
        vlb_val = float(vlb.data)
    max_abs = float(np.max(np.abs(out.data))) if out.data.size else 0.0
    if not np.isfinite(loss.data).all():
        raise nx.NumericError(f"non-finite loss in {mode} (t range [{t.min()}, {t.max()}], max |output| {max_abs:.3g})")
    return LossResult(loss, float(mse.data), vlb_val, max_abs)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptState:
    kind: str
    count: int = 0
    buffers: dict = field(default_factory=dict)  # buffer name -> {param name -> array}

    def shapes_match(self, params: dict) -> bool:
        return all(buf[k].shape == params[k].shape for buf in self.buffers.values() for k in params)


def init_opt_state(kind: str, params: dict) -> OptState:
    names = ("m", "v") if kind == "adamw" else ("m", "diff", "n", "prev")
    zeros = lambda: {k: np.zeros_like(p.data) for k, p in params.items()}  # noqa: E731
    return OptState(kind, 0, {n: zeros() for n in names})


def _arrays(params: dict) -> dict[str, np.ndarray]:
    return {k: (p.data if isinstance(p, nx.Tensor) else p) for k, p in params.items()}


def adamw_step(
    params: dict,
    grads: dict,
    state: OptState,
    lr: float = 1e-4,
    betas: tuple = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> OptState:
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    b1, b2 = betas
    state.count += 1
    bc1 = 1.0 - b1**state.count
    bc2 = 1.0 - b2**state.count
    m, v = state.buffers["m"], state.buffers["v"]
    for k, p in _arrays(params).items():
        g = grads[k]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        denom = np.sqrt(v[k] / bc2) + eps
        p -= (lr * (m[k] / bc1) / denom).astype(p.dtype)
    return state


def adan_step(
    params: dict,
    grads: dict,
    state: OptState,
    lr: float = 1e-4,
    betas: tuple = (0.98, 0.92, 0.99),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> OptState:
    """Adaptive Nesterov momentum: moments of gradients, gradient differences, and the corrected gradient.

    The previous-gradient buffer starts at the first gradient, so the first
    difference is zero. Decay is applied proximally: p <- (p - lr*u) / (1 + lr*wd).
    """
    b1, b2, b3 = betas
    first = state.count == 0
    state.count += 1
    bc1 = 1.0 - b1**state.count
    bc2 = 1.0 - b2**state.count
    bc3 = 1.0 - b3**state.count
    m, d, n, prev = (state.buffers[x] for x in ("m", "diff", "n", "prev"))
    for k, p in _arrays(params).items():
        g = grads[k]
        if first:
            prev[k] = np.array(g, copy=True)
        diff = g - prev[k]
        m[k] = b1 * m[k] + (1.0 - b1) * g
        d[k] = b2 * d[k] + (1.0 - b2) * diff
        corr = g + b2 * diff
        n[k] = b3 * n[k] + (1.0 - b3) * corr * corr
        denom = np.sqrt(n[k] / bc3) + eps
        update = (m[k] / bc1 + b2 * d[k] / bc2) / denom
        p -= (lr * update).astype(p.dtype)
        if weight_decay:
            p /= 1.0 + lr * weight_decay
        prev[k] = np.array(g, copy=True)
    return state


def ema_update(ema: dict[str, np.ndarray], params: dict, decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * params, in place."""
    if not 0 <= decay < 1:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    arrays = _arrays(params)
    if set(ema) != set(arrays):
        raise KeyError(f"EMA tree mismatch: {sorted(set(ema) ^ set(arrays))}")
    for k, p in arrays.items():
        if ema[k].shape != p.shape:
            raise nx.ShapeError("ema_update", ema[k].shape, p.shape)
        if decay == 0:
            ema[k][...] = p
        else:
            ema[k] *= decay
            ema[k] += (1.0 - decay) * p
    return ema


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # sorted so the value does not depend on dict order (a restored checkpoint lists names sorted)
    return math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads)))


# --------------------------------------------------------------------------
# training state and step


@dataclass
class TrainState:
    step: int
    params: dict[str, nx.Tensor]
    opt: OptState
    ema: dict[str, np.ndarray]
    rngs: dict[str, np.random.Generator]
    data_state: dict | None = None


def init_train_state(cfg: ModelConfig, tcfg: TrainConfig) -> TrainState:
    params = init_params(cfg, seed=tcfg.seed, dtype=np.dtype(tcfg.dtype))
    ema = {k: np.array(p.data, copy=True) for k, p in params.items()}
    rngs = {s: nx.make_rng(tcfg.seed, s) for s in RNG_STREAMS}
    return TrainState(0, params, init_opt_state(tcfg.optimizer, params), ema, rngs)


@dataclass
class StepDraws:
    """Random quantities of one step, shared by both passes."""

    t: np.ndarray
    eps: np.ndarray
    labels: np.ndarray
    mask: object


def draw_step(rngs: dict, x0: np.ndarray, labels: np.ndarray, cfg: ModelConfig, tcfg: TrainConfig, T: int) -> StepDraws:
    B = len(x0)
    t = rngs["timesteps"].integers(1, T + 1, size=B)
    eps = rngs["noise"].standard_normal(x0.shape).astype(x0.dtype)
    drop = rngs["dropout"].random(B) < tcfg.label_dropout
    labels = np.where(drop, cfg.classes, labels)
    mask = None
    if tcfg.dual_pass and cfg.variant != "dit":
        rho = sample_mask_ratio(tcfg.mask_lo, tcfg.mask_hi, rngs["mask"])
        n = cfg.geometry.n_tokens
        mask = sample_mask(n, rho, rngs["mask"], batch=B) if masked_count(n, rho) else full_mask(n, B)
    return StepDraws(t, eps, labels, mask)


def step_losses(params: dict, cfg: ModelConfig, tcfg: TrainConfig, sched: NoiseSchedule, x0, draws: StepDraws):
    """(total, L_full, L_masked) as Tensors on the active tape."""
    kw = dict(min_snr_gamma=tcfg.min_snr_gamma, vlb_lambda=tcfg.vlb_lambda if cfg.learn_sigma else 0.0)
    full = diffusion_loss(params, cfg, sched, x0, draws.labels, draws.t, draws.eps, "train-full", **kw)
    if draws.mask is None:
        return full.loss, full.loss, None
    masked = diffusion_loss(
        params, cfg, sched, x0, draws.labels, draws.t, draws.eps, "train-masked", draws.mask, loss_tokens=tcfg.loss_tokens, **kw
    )
    return nx.add(full.loss, masked.loss), full.loss, masked.loss


def dual_pass_step(state: TrainState, batch: dict, cfg: ModelConfig, tcfg: TrainConfig, sched: NoiseSchedule) -> dict:
    """One optimizer step on L_full + L_masked; returns the logged scalars."""
    dtype = np.dtype(tcfg.dtype)
    x0 = np.asarray(batch["x0"], dtype=dtype)
    draws = draw_step(state.rngs, x0, np.asarray(batch["label"]), cfg, tcfg, sched.T)
    with nx.Tape(check_finite=True) as tape:
        total, l_full, l_masked = step_losses(state.params, cfg, tcfg, sched, x0, draws)
    grads = tape.gradient(total, state.params)
    gnorm = global_norm(grads)
    if tcfg.grad_clip > 0 and gnorm > tcfg.grad_clip:
        scale = tcfg.grad_clip / (gnorm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    betas = tcfg.resolved_betas
    if tcfg.optimizer == "adamw":
        adamw_step(state.params, grads, state.opt, tcfg.lr, betas, tcfg.weight_decay, tcfg.eps)
    else:
        adan_step(state.params, grads, state.opt, tcfg.lr, betas, tcfg.weight_decay, tcfg.eps)
    ema_update(state.ema, state.params, tcfg.ema_decay)
    state.step += 1
    return {
        "step": state.step,
        "loss_full": float(l_full.data),
        "loss_masked": float(l_masked.data) if l_masked is not None else 0.0,
        "loss_total": float(total.data),
        "grad_norm": gnorm,
        "lr": tcfg.lr,
    }


def format_metrics_row(row: dict) -> str:
    return ",".join([str(int(row["step"]))] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


class MetricsWriter:
    """CSV sink: a fingerprint comment, the fixed header, then one row per step."""

    def __init__(self, path: str, fingerprint: str = "", append: bool = False):
        self.path = path
        fresh = not append
        self._fh = open(path, "a" if append else "w", encoding="ascii", newline="\n")
        if fresh:
            if fingerprint:
                self._fh.write(f"# fingerprint {fingerprint}\n")
            self._fh.write(",".join(METRIC_COLUMNS) + "\n")

    def __call__(self, row: dict) -> None:
        self._fh.write(format_metrics_row(row) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def truncate_metrics(path: str, step: int) -> None:
    """Drop rows after ``step`` so a resumed run appends cleanly."""
    with open(path, encoding="ascii") as fh:
        lines = fh.readlines()
    keep = []
    for line in lines:
        head = line.split(",", 1)[0]
        if head.isdigit() and int(head) > step:
            continue
        keep.append(line)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(keep)


def train_loop(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    sched: NoiseSchedule,
    data_iter,
    sink: Callable[[dict], None] | None = None,
    state: TrainState | None = None,
    checkpoint: Callable[[TrainState], None] | None = None,
    evaluate: Callable[[TrainState], None] | None = None,
    eval_steps: tuple = (),
) -> TrainState:
    """Run dual-pass steps until ``tcfg.steps``.

    ``checkpoint`` is called every ``ckpt_every`` steps and once at exit;
    ``evaluate`` runs at step 0 and after each step listed in ``eval_steps``.
    A failing step writes a checkpoint of the last good state before re-raising.
    """
    state = state or init_train_state(cfg, tcfg)
    if state.data_state is not None:
        data_iter.load_state_dict(state.data_state)
    eval_at = set(eval_steps)
    if evaluate is not None and state.step in eval_at:
        evaluate(state)
    while state.step < tcfg.steps:
        batch = next(data_iter)
        try:
            row = dual_pass_step(state, batch, cfg, tcfg, sched)
        except nx.NumericError as exc:
            if checkpoint is not None:
                checkpoint(state)
            raise nx.NumericError(f"step {state.step + 1}: {exc}") from exc
        state.data_state = data_iter.state_dict()
        if sink is not None:
            sink(row)
        if checkpoint is not None and tcfg.ckpt_every and state.step % tcfg.ckpt_every == 0 and state.step < tcfg.steps:
            checkpoint(state)
        if evaluate is not None and state.step in eval_at:
            evaluate(state)
    state.data_state = data_iter.state_dict()
    if checkpoint is not None:
        checkpoint(state)
    return state


class Stopwatch:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0
