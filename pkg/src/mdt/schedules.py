"""Noise schedules, forward noising, reverse-step coefficients and guidance ramps.

Arrays are indexed by timestep with index 0 standing for the clean sample,
so ``sched.alpha_bar[t]`` is the cumulative product up to step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    snr: np.ndarray
    # original training timestep for each (possibly respaced) index
    timestep_map: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas, timestep_map=None) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not ((b > 0) & (b < 1)).all():
            raise ScheduleError("betas must lie in (0, 1)")
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        post = np.zeros_like(beta)
        # beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t=1
        post[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        snr = np.full_like(beta, np.inf)
        snr[1:] = alpha_bar[1:] / (1.0 - alpha_bar[1:])
        if timestep_map is None:
            timestep_map = np.arange(len(beta))
        for arr in (beta, alpha, alpha_bar, post, snr):
            arr.setflags(write=False)
        tm = np.asarray(timestep_map, dtype=np.int64)
        tm.setflags(write=False)
        return cls(beta, alpha, alpha_bar, post, snr, tm)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or (t < 1).any() or (t > self.T).any():
            raise ScheduleError(f"timestep out of range [1, {self.T}]: {t}")
        return t


def build_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    if T < 1 or not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"invalid schedule T={T}, beta range [{beta_min}, {beta_max}]")
    if T == 1:
        betas = np.array([beta_min])
    else:
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return NoiseSchedule.from_betas(betas)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise ``x0`` to step ``t``; ``t`` is a scalar or one step per leading sample."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    dtype = x0.dtype
    return (np.sqrt(ab).astype(dtype) * x0 + np.sqrt(1.0 - ab).astype(dtype) * eps).astype(dtype)


@dataclass(frozen=True)
class StepCoeffs:
    """x_{t-1} mean = coef_x * x_t - coef_eps * eps_hat; noise variance ``var``."""

    coef_x: float
    coef_eps: float
    var: float
    log_var_clipped: float


def posterior_step_coeffs(t: int, sched: NoiseSchedule) -> StepCoeffs:
    t = int(sched.check_t(t))
    a = sched.alpha[t]
    coef_x = 1.0 / math.sqrt(a)
    coef_eps = sched.beta[t] / (math.sqrt(a) * math.sqrt(1.0 - sched.alpha_bar[t]))
    var = 0.0 if t == 1 else float(sched.posterior_var[t])
    return StepCoeffs(coef_x, coef_eps, var, posterior_log_var_clipped(sched)[t])


def posterior_log_var_clipped(sched: NoiseSchedule) -> np.ndarray:
    """log beta_tilde with the t=1 zero replaced by the t=2 value."""
    pv = np.array(sched.posterior_var)
    if sched.T >= 2:
        pv[1] = pv[2]
    else:
        pv[1] = sched.beta[1]
    pv[0] = pv[1]
    return np.log(pv)


def posterior_mean_coeffs(sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of x0 and x_t in the mean of q(x_{t-1} | x_t, x0)."""
    ab = sched.alpha_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    c0 = np.zeros_like(ab)
    ct = np.zeros_like(ab)
    c0[1:] = sched.beta[1:] * np.sqrt(ab_prev[1:]) / (1.0 - ab[1:])
    ct[1:] = (1.0 - ab_prev[1:]) * np.sqrt(sched.alpha[1:]) / (1.0 - ab[1:])
    return c0, ct


def min_snr_weight(t, gamma: float, sched: NoiseSchedule) -> np.ndarray:
    """min(snr_t, gamma) / snr_t for epsilon prediction."""
    if not gamma > 0:
        raise ScheduleError(f"min-SNR gamma must be positive, got {gamma}")
    t = sched.check_t(t)
    snr = sched.snr[t]
    return np.minimum(snr, gamma) / snr


def respace(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided, strictly increasing timesteps ending at T.

    Step k (1-based) maps to round_half_up(k * T / n_steps).
    """
    if not 1 <= n_steps <= T:
        raise ScheduleError(f"n_steps must be in [1, {T}], got {n_steps}")
    k = np.arange(1, n_steps + 1, dtype=np.int64)
    return (2 * k * T + n_steps) // (2 * n_steps)


def respaced_schedule(sched: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Schedule over the kept steps; consecutive kept steps reuse their beta verbatim."""
    steps = respace(sched.T, n_steps)
    betas = np.empty(n_steps)
    prev = 0
    for i, t in enumerate(steps):
        if t - prev == 1:
            betas[i] = sched.beta[t]
        else:
            betas[i] = 1.0 - sched.alpha_bar[t] / sched.alpha_bar[prev]
        prev = t
    return NoiseSchedule.from_betas(betas, timestep_map=np.concatenate([[0], steps]))


@dataclass(frozen=True)
class GuidanceSchedule:
    w_max: float
    s: float = 4.0
    t_max: int = 250


def guidance_scale_at(i: int, gs: GuidanceSchedule) -> float:
    """Power-cosine guidance: 0 at i=0, rising to ``w_max`` at i=t_max."""
    if not 0 <= i <= gs.t_max:
        raise ScheduleError(f"progress index {i} outside [0, {gs.t_max}]")
    if gs.t_max == 0 or i == gs.t_max:
        return float(gs.w_max)
    r = (i / gs.t_max) ** gs.s
    return (1.0 - math.cos(math.pi * r)) / 2.0 * gs.w_max
