import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqlcmd.errors import ContractError, OrderingError
from vqlcmd.schedule import T_MAX, T_MIN, Schedule

times = st.floats(T_MIN, T_MAX)
shifts = st.floats(-5, 5)


def ordered(a, b):
    return (a, b) if a <= b else (b, a)


def test_log_snr_midpoint():
    assert Schedule().log_snr(0.5) == pytest.approx(0.0, abs=1e-15)
    assert Schedule(shift=3.0).log_snr(0.5) == pytest.approx(3.0, abs=1e-15)


def test_log_snr_quarter_reference():
    # -2 ln tan(pi / 8), evaluated with 40-digit arithmetic
    assert Schedule().log_snr(0.25) == pytest.approx(1.7627471740390860505, rel=1e-14)


def test_alpha_sigma_at_zero_log_snr():
    a, s = Schedule().alpha_sigma(0.5)
    assert a == pytest.approx(math.sqrt(0.5), abs=1e-15)
    assert s == pytest.approx(math.sqrt(0.5), abs=1e-15)


def test_alpha_matches_cosine_at_zero_shift():
    assert Schedule().alpha_sigma(0.25)[0] == pytest.approx(0.92387953251128675613, abs=1e-12)
    t = np.random.default_rng(0).uniform(T_MIN, T_MAX, 1000)
    np.testing.assert_allclose(Schedule().alpha_sigma(t)[0], np.cos(np.pi * t / 2), atol=1e-10)


def test_variance_preserving_on_random_grid():
    rng = np.random.default_rng(1)
    for shift in rng.uniform(-6, 6, 20):
        a, s = Schedule(shift=shift).alpha_sigma(rng.uniform(0, 1, 1000))
        assert np.abs(a**2 + s**2 - 1).max() < 1e-12


def test_clamping_keeps_endpoints_finite():
    sch = Schedule()
    assert np.isfinite(sch.log_snr(0.0)) and np.isfinite(sch.log_snr(1.0))
    assert sch.log_snr(0.0) == sch.log_snr(T_MIN)


def test_invalid_clamps_rejected():
    with pytest.raises(ContractError):
        Schedule(t_min=0.5, t_max=0.4)
    with pytest.raises(ContractError):
        Schedule(t_min=0.0)


def test_transition_identity():
    a, v = Schedule().transition(0.3, 0.3)
    assert a == 1.0 and v == 0.0


def test_transition_closed_form():
    a, _ = Schedule().transition(0.25, 0.5)
    assert a == pytest.approx(0.76536686473017954346, rel=1e-12)


def test_transition_ordering_error():
    with pytest.raises(OrderingError):
        Schedule().transition(0.6, 0.4)
    with pytest.raises(OrderingError):
        Schedule().posterior(0.6, 0.4)


@settings(max_examples=200, deadline=None)
@given(times, times, shifts)
def test_transition_composition_with_marginals(x, y, shift):
    s, t = ordered(x, y)
    sch = Schedule(shift=shift)
    a_ts, v_ts = sch.transition(s, t)
    a_s, sig_s = sch.alpha_sigma(s)
    a_t, sig_t = sch.alpha_sigma(t)
    assert v_ts >= 0
    assert abs(a_ts * a_s - a_t) < 1e-10
    assert abs(a_ts**2 * sig_s**2 + v_ts - sig_t**2) < 1e-10


@settings(max_examples=200, deadline=None)
@given(times, times, times, shifts)
def test_markov_composition(x, y, z, shift):
    s, u, t = sorted([x, y, z])
    sch = Schedule(shift=shift)
    a_us, v_us = sch.transition(s, u)
    a_tu, v_tu = sch.transition(u, t)
    a_ts, v_ts = sch.transition(s, t)
    assert abs(a_tu * a_us - a_ts) < 1e-10
    assert abs(a_tu**2 * v_us + v_tu - v_ts) < 1e-10


def test_posterior_identity_at_equal_times():
    k = Schedule().posterior(0.4, 0.4)
    assert (k.post_coef_z, k.post_coef_x, k.post_var) == (1.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(times, times, shifts)
def test_posterior_mean_consistency(x, y, shift):
    s, t = ordered(x, y)
    sch = Schedule(shift=shift)
    k = sch.posterior(s, t)
    a_s, _ = sch.alpha_sigma(s)
    a_t, _ = sch.alpha_sigma(t)
    assert k.post_var >= 0
    assert abs(k.post_coef_z * a_t + k.post_coef_x - a_s) < 1e-10


def bayes_posterior(x, s, t, sch):
    """Condition z_t = a_ts z_s + noise on the prior z_s ~ N(a_s x, sig_s^2) directly."""
    a_s, sig_s = sch.alpha_sigma(s)
    a_t, sig_t = sch.alpha_sigma(t)
    a_ts = a_t / a_s
    v_ts = sig_t**2 - a_ts**2 * sig_s**2
    # joint Gaussian (z_s, z_t): cov(z_s, z_t) = a_ts sig_s^2, var(z_t) = sig_t^2
    gain = a_ts * sig_s**2 / sig_t**2
    post_var = sig_s**2 - gain * a_ts * sig_s**2
    # mean = a_s x + gain (z_t - a_t x): coefficients on z_t and on x
    return gain, a_s - gain * a_t, post_var, v_ts


@pytest.mark.parametrize("s,t,shift", [(0.1, 0.2, 0.0), (0.3, 0.9, 2.0), (0.45, 0.5, -3.0), (0.05, 0.95, 1.0)])
def test_posterior_matches_conjugate_bayes(s, t, shift):
    sch = Schedule(shift=shift)
    k = sch.posterior(s, t)
    cz, cx, pv, vts = bayes_posterior(1.0, s, t, sch)
    assert k.post_coef_z == pytest.approx(cz, abs=1e-8)
    assert k.post_coef_x == pytest.approx(cx, abs=1e-8)
    assert k.post_var == pytest.approx(pv, abs=1e-8)
    assert k.var_ts == pytest.approx(vts, abs=1e-8)


def test_snr_prime_negative_and_shift_structure():
    t = np.linspace(T_MIN, T_MAX, 500)
    a, b = Schedule(), Schedule(shift=3.0)
    assert np.all(a.snr_prime(t) < 0)
    # d lambda / dt does not depend on the shift, so SNR' scales by e^shift
    np.testing.assert_allclose(b.snr_prime(t) / b.snr(t), a.snr_prime(t) / a.snr(t), rtol=1e-12)


def test_snr_prime_reference_value():
    # derivative of tan(pi t / 2)^-2 at t = 0.3, 40-digit arithmetic
    assert Schedule().snr_prime(0.3) == pytest.approx(-29.915100225030342752, rel=1e-12)


@pytest.mark.parametrize("shift", [-3.0, 0.0, 3.0])
def test_snr_prime_finite_differences(shift):
    sch = Schedule(shift=shift)
    t = np.linspace(0.01, 0.99, 99)
    h = 1e-6
    fd = (sch.snr(t + h) - sch.snr(t - h)) / (2 * h)
    np.testing.assert_allclose(sch.snr_prime(t), fd, rtol=1e-5)


@settings(max_examples=100, deadline=None)
@given(times, times, shifts, st.floats(-3, 3))
def test_log_snr_monotone_and_shift_offset(x, y, shift, delta):
    s, t = ordered(x, y)
    sch = Schedule(shift=shift)
    if t - s > 1e-9:
        assert sch.log_snr(s) > sch.log_snr(t)
    moved = Schedule(shift=shift + delta)
    assert moved.log_snr(t) - sch.log_snr(t) == pytest.approx(delta, abs=1e-9)


def test_time_grid():
    sch = Schedule()
    np.testing.assert_array_equal(sch.time_grid(1), [T_MIN, T_MAX])
    g = sch.time_grid(4)
    assert len(g) == 5 and np.all(np.diff(g) > 0)
    np.testing.assert_allclose(np.diff(g), np.diff(g)[0], rtol=1e-12)
    np.testing.assert_array_equal(sch.clamp(g), g)
    with pytest.raises(ContractError):
        sch.time_grid(0)
