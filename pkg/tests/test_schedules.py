import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdt import numerics as nx
from mdt.schedules import (
    GuidanceSchedule,
    ScheduleError,
    build_linear_schedule,
    guidance_scale_at,
    min_snr_weight,
    posterior_step_coeffs,
    q_sample,
    respace,
    respaced_schedule,
)

# alpha_bar[1000] of the default schedule, computed once with exact rational
# arithmetic over the linspace beta table and frozen here.
ALPHA_BAR_1000 = 4.0358297653756835e-05


def _alpha_bar_oracle(T=1000, lo=1e-4, hi=2e-2):
    # independent re-derivation: explicit loop, betas from the closed-form interpolation
    out = [1.0]
    prod = 1.0
    for k in range(T):
        beta = lo + (hi - lo) * k / (T - 1)
        prod *= 1.0 - beta
        out.append(prod)
    return np.array(out)


def test_linear_endpoints_are_exact():
    s = build_linear_schedule()
    assert s.beta[1] == 1e-4 and s.beta[1000] == 2e-2
    assert s.T == 1000


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.01, 0.01)
    assert s.alpha_bar[1] == pytest.approx(0.99, abs=1e-15)


def test_alpha_bar_matches_product_oracle():
    s = build_linear_schedule()
    np.testing.assert_allclose(s.alpha_bar, _alpha_bar_oracle(), rtol=1e-12)
    assert s.alpha_bar[1000] == pytest.approx(ALPHA_BAR_1000, rel=1e-9)


def test_frozen_alpha_bar_constant_from_rationals():
    prod = Fraction(1)
    lo, hi = Fraction(1, 10000), Fraction(2, 100)
    for k in range(1000):
        prod *= 1 - (lo + (hi - lo) * Fraction(k, 999))
    assert float(prod) == pytest.approx(ALPHA_BAR_1000, rel=1e-12)


def test_table_invariants():
    s = build_linear_schedule()
    b, ab, snr = s.beta[1:], s.alpha_bar[1:], s.snr[1:]
    assert np.all(np.diff(b) > 0) and np.all((b >= 0) & (b < 1))
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab <= 1))
    assert np.all(np.diff(snr) < 0)
    np.testing.assert_allclose(snr * (1 - ab), ab, rtol=1e-13)


@pytest.mark.parametrize("bad", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_schedule_rejected(bad):
    with pytest.raises(ScheduleError):
        build_linear_schedule(*bad)


def test_q_sample_closed_forms():
    s = build_linear_schedule()
    x0 = np.zeros((2, 3))
    np.testing.assert_allclose(q_sample(x0, 300, np.ones_like(x0), s), math.sqrt(1 - s.alpha_bar[300]))
    x0 = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_allclose(q_sample(x0, 300, np.zeros_like(x0), s), math.sqrt(s.alpha_bar[300]) * x0)


def test_q_sample_matches_oracle_at_500():
    s = build_linear_schedule()
    ab = _alpha_bar_oracle()[500]
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((4, 2, 8, 8)), rng.standard_normal((4, 2, 8, 8))
    np.testing.assert_allclose(q_sample(x0, 500, eps, s), math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, rtol=1e-12)


def test_q_sample_per_sample_timesteps():
    s = build_linear_schedule()
    x0 = np.ones((3, 1, 2, 2))
    out = q_sample(x0, np.array([1, 500, 1000]), np.zeros_like(x0), s)
    for i, t in enumerate([1, 500, 1000]):
        np.testing.assert_allclose(out[i], math.sqrt(s.alpha_bar[t]))


def test_q_sample_rejects_out_of_range():
    s = build_linear_schedule()
    with pytest.raises(ScheduleError):
        q_sample(np.zeros(2), 0, np.zeros(2), s)
    with pytest.raises(ScheduleError):
        q_sample(np.zeros(2), 1001, np.zeros(2), s)


def test_q_sample_preserves_marginal():
    s = build_linear_schedule()
    t, x0, n = 400, 0.7, 200_000
    eps = nx.make_rng(0, "marginal").standard_normal(n)
    xt = q_sample(np.full(n, x0), t, eps, s)
    ab = s.alpha_bar[t]
    se_mean = math.sqrt((1 - ab) / n)
    se_var = (1 - ab) * math.sqrt(2 / (n - 1))
    assert abs(xt.mean() - math.sqrt(ab) * x0) < 3 * se_mean
    assert abs(xt.var(ddof=1) - (1 - ab)) < 3 * se_var


def test_posterior_coeffs():
    s = build_linear_schedule()
    assert posterior_step_coeffs(1, s).var == 0.0
    for t in (1, 10, 999):
        c = posterior_step_coeffs(t, s)
        assert c.coef_x * 0.0 - c.coef_eps * 0.0 == 0.0
    c = posterior_step_coeffs(700, s)
    ab = _alpha_bar_oracle()
    beta = 1e-4 + (2e-2 - 1e-4) * 699 / 999
    x, e = 0.37, -1.2
    mu = (x - beta / math.sqrt(1 - ab[700]) * e) / math.sqrt(1 - beta)
    assert c.coef_x * x - c.coef_eps * e == pytest.approx(mu, rel=1e-12)
    assert c.var == pytest.approx(beta * (1 - ab[699]) / (1 - ab[700]), rel=1e-12)


def test_min_snr_examples():
    s = build_linear_schedule()
    # build tiny schedules with a chosen alpha_bar at t=1
    half = build_linear_schedule(1, 0.5, 0.5)
    assert min_snr_weight(1, 5.0, half)[()] == 1.0
    nine = build_linear_schedule(1, 0.1, 0.1)
    assert min_snr_weight(1, 5.0, nine)[()] == pytest.approx(5 / 9, rel=1e-12)
    w = min_snr_weight(np.arange(1, 1001), 1e300, s)
    np.testing.assert_array_equal(w, 1.0)
    with pytest.raises(ScheduleError):
        min_snr_weight(1, 0.0, s)


def test_min_snr_per_term():
    s = build_linear_schedule()
    t = np.arange(1, 1001)
    w = min_snr_weight(t, 5.0, s)
    snr = s.snr[t]
    assert np.all(w[snr <= 5] == 1.0)
    assert np.all(w[snr > 5] < 1.0) and np.all(w > 0)


def test_respace_examples():
    np.testing.assert_array_equal(respace(1000, 1000), np.arange(1, 1001))
    r = respace(1000, 250)
    assert len(r) == 250 and r[-1] == 1000 and set(np.diff(r)) == {4}
    np.testing.assert_array_equal(respace(10, 5), [2, 4, 6, 8, 10])
    with pytest.raises(ScheduleError):
        respace(10, 11)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2000), st.data())
def test_respace_properties(T, data):
    n = data.draw(st.integers(1, T))
    r = respace(T, n)
    assert len(r) == n and r[-1] == T and r[0] >= 1
    assert np.all(np.diff(r) > 0)


def test_identity_respacing_reproduces_tables():
    s = build_linear_schedule()
    r = respaced_schedule(s, 1000)
    for name in ("beta", "alpha", "alpha_bar", "posterior_var", "snr"):
        np.testing.assert_array_equal(getattr(r, name), getattr(s, name))


def test_respaced_alpha_bar_is_subsampled():
    s = build_linear_schedule()
    r = respaced_schedule(s, 50)
    np.testing.assert_allclose(r.alpha_bar[1:], s.alpha_bar[respace(1000, 50)], rtol=1e-12)


def test_guidance_examples():
    assert guidance_scale_at(0, GuidanceSchedule(3.8, 4.0, 100)) == 0.0
    assert guidance_scale_at(100, GuidanceSchedule(3.8, 4.0, 100)) == 3.8
    assert guidance_scale_at(50, GuidanceSchedule(2.0, 1.0, 100)) == pytest.approx(1.0, abs=1e-15)
    assert guidance_scale_at(50, GuidanceSchedule(3.8, 4.0, 100)) == pytest.approx(3.8 * (1 - math.cos(math.pi / 16)) / 2, abs=1e-15)
    assert guidance_scale_at(50, GuidanceSchedule(3.8, 4.0, 100)) == pytest.approx(0.0365, abs=5e-5)
    with pytest.raises(ScheduleError):
        guidance_scale_at(101, GuidanceSchedule(3.8, 4.0, 100))


@pytest.mark.parametrize("s", [1, 2, 4, 8])
def test_guidance_monotone(s):
    gs = GuidanceSchedule(3.8, s, 250)
    w = [guidance_scale_at(i, gs) for i in range(251)]
    assert all(b >= a for a, b in zip(w, w[1:]))


def test_larger_power_gives_smaller_scale_before_end():
    for i in range(1, 250):
        vals = [guidance_scale_at(i, GuidanceSchedule(1.0, s, 250)) for s in (1, 2, 4, 8)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
