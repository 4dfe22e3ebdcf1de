"""Ancestral DDPM sampling with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .network import ModelConfig, model_forward
from .schedules import GuidanceSchedule, NoiseSchedule, guidance_scale_at, posterior_log_var_clipped, posterior_step_coeffs, respaced_schedule

GUIDANCE_MODES = ("off", "fixed", "power-cosine")


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 250
    guidance: str = "off"
    w: float = 3.8
    s: float = 4.0
    labels: tuple = ()
    seed: int = 0
    use_ema: bool = False

    def __post_init__(self):
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"guidance must be one of {GUIDANCE_MODES}, got {self.guidance!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """eps_u + w (eps_c - eps_u), evaluated as w*eps_c + (1-w)*eps_u so w in {0, 1} is exact."""
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise nx.ShapeError("cfg_combine", eps_cond.shape, eps_uncond.shape)
    if w == 1:
        return eps_cond.copy()
    if w == 0:
        return eps_uncond.copy()
    return (w * eps_cond + (1.0 - w) * eps_uncond).astype(eps_cond.dtype)


def progress_index(step_position: int, n_steps: int) -> tuple[int, int]:
    """(i, t_max) for :func:`guidance_scale_at`; i runs 0..n_steps-1 from the noisiest step."""
    if not 0 <= step_position < n_steps:
        raise ValueError(f"step position {step_position} outside [0, {n_steps})")
    return step_position, n_steps - 1


def guidance_weight(sampler: SamplerConfig, step_position: int) -> float:
    if sampler.guidance == "off":
        return 1.0
    if sampler.guidance == "fixed":
        return float(sampler.w)
    i, t_max = progress_index(step_position, sampler.n_steps)
    return guidance_scale_at(i, GuidanceSchedule(sampler.w, sampler.s, t_max))


class NetworkEps:
    """Inference-mode wrapper returning (eps, variance logits or None) as arrays."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.params = {k: (v if isinstance(v, nx.Tensor) else nx.Tensor(v)) for k, v in params.items()}
        self.cfg = cfg
        self.null_label = cfg.classes
        self.shape = (cfg.in_channels, cfg.input_size, cfg.input_size)
        self.dtype = self.params["x_embed.w"].dtype
        self.learn_sigma = cfg.learn_sigma

    def __call__(self, x: np.ndarray, t: np.ndarray, labels: np.ndarray):
        out = model_forward(x, t, labels, self.params, self.cfg, "inference").data
        c = self.cfg.in_channels
        if self.learn_sigma:
            return out[:, :c], out[:, c:]
        return out, None


@dataclass
class GaussianScoreModel:
    """Exact epsilon-prediction for data x0 ~ N(mean, std^2) elementwise, any label."""

    mean: float
    std: float
    sched: NoiseSchedule
    shape: tuple = (2, 2, 2)
    dtype: np.dtype = np.dtype(np.float64)
    null_label: int = 1
    learn_sigma: bool = False

    def __call__(self, x: np.ndarray, t: np.ndarray, labels: np.ndarray):
        ab = self.sched.alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (x.ndim - 1))
        # E[eps | x_t] for jointly Gaussian (x0, eps)
        k = np.sqrt(1.0 - ab) / (ab * self.std**2 + 1.0 - ab)
        return (k * (x - np.sqrt(ab) * self.mean)).astype(x.dtype), None


@dataclass
class SampleResult:
    latents: np.ndarray
    labels: np.ndarray
    applied_w: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)
    forwards: int = 0


def resolve_labels(labels, n: int, classes: int, seed: int) -> np.ndarray:
    """Explicit labels are cycled to length n; None draws them from the "labels" stream."""
    if labels is None or (isinstance(labels, str) and labels == "random") or (not isinstance(labels, str) and len(labels) == 0):
        return nx.make_rng(seed, "labels").integers(0, classes, size=n)
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.min() < 0 or arr.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes}), got {arr}")
    return np.resize(arr, n)


def ddpm_sample(
    model: Callable,
    sampler: SamplerConfig,
    sched: NoiseSchedule,
    n: int,
    labels: Sequence[int] | np.ndarray | None = None,
) -> SampleResult:
    """Reverse the respaced chain from seeded Gaussian noise; the final step adds no noise.

    ``model(x, t, labels)`` returns (eps, variance logits or None); ``t`` are
    original training timesteps.
    """
    rs = respaced_schedule(sched, sampler.n_steps)
    log_var_clip = posterior_log_var_clipped(rs)
    dtype = model.dtype
    labels = np.asarray(labels if labels is not None else np.zeros(n, dtype=np.int64), dtype=np.int64)
    if labels.shape != (n,):
        raise nx.ShapeError("ddpm_sample", labels.shape, (n,))
    null = np.full(n, model.null_label, dtype=np.int64)
    rng = nx.make_rng(sampler.seed, "sample")
    x = rng.standard_normal((n,) + tuple(model.shape)).astype(dtype)
    result = SampleResult(x, labels)
    for pos, k in enumerate(range(sampler.n_steps, 0, -1)):
        t_orig = np.full(n, rs.timestep_map[k], dtype=np.int64)
        eps, var_out = model(x, t_orig, labels)
        result.forwards += 1
        w = guidance_weight(sampler, pos)
        if sampler.guidance != "off":
            eps_u, var_u = model(x, t_orig, null)
            result.forwards += 1
            eps = cfg_combine(eps, eps_u, w)
        result.applied_w.append(w)
        result.timesteps.append(int(rs.timestep_map[k]))
        co = posterior_step_coeffs(k, rs)
        mean = co.coef_x * x - co.coef_eps * eps
        if k > 1:
            if var_out is not None:
                frac = (var_out.astype(np.float64) + 1.0) / 2.0
                log_var = frac * math.log(rs.beta[k]) + (1.0 - frac) * log_var_clip[k]
                std = np.exp(0.5 * log_var)
            else:
                std = math.sqrt(co.var)
            z = rng.standard_normal(x.shape)
            x = (mean + std * z).astype(dtype)
        else:
            x = mean.astype(dtype)
        if not np.isfinite(x).all():
            raise nx.NumericError(f"non-finite sample state at sampling step {pos} (t={int(rs.timestep_map[k])})")
    result.latents = x
    return result
