import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from digmon.metrology import (
    AveragingPolicy,
    InsufficientDataError,
    RateController,
    UncertaintyEstimate,
    estimate_noise,
    predicted_sigma,
    select_rate,
    sigma_power,
    software_average,
)

pos = st.floats(0, 100, allow_nan=False)


def test_sigma_power_examples():
    assert sigma_power(50, 12, 0.1, 0) == 12 * 0.1
    assert sigma_power(0, 0, 0.3, 0.2) == 0
    assert sigma_power(50, 12, 0.1, 0.01) == pytest.approx(1.3)
    with pytest.raises(ValueError):
        sigma_power(1, 1, -0.1, 0)
    with pytest.raises(ValueError):
        sigma_power(1, 1, 0, -1e-9)


def test_sigma_power_monte_carlo():
    rng = np.random.default_rng(7)
    i = rng.normal(50, 0.1, 1_000_000)
    v = rng.normal(12, 0.01, 1_000_000)
    assert np.std(i * v) == pytest.approx(sigma_power(50, 12, 0.1, 0.01), rel=0.02)


@given(pos, pos, pos, pos, st.floats(0, 10))
def test_sigma_power_monotone(i, v, si, sv, d):
    base = sigma_power(i, v, si, sv)
    for args in ((i + d, v, si, sv), (i, v + d, si, sv), (i, v, si + d, sv), (i, v, si, sv + d)):
        assert sigma_power(*args) >= base


def test_estimate_noise_constant_and_short():
    e = estimate_noise(np.full(100, 15.0), np.full(100, 12.0))
    assert (e.sigma_i, e.sigma_v, e.sigma_p, e.cv) == (0, 0, 0, 0)
    with pytest.raises(InsufficientDataError):
        estimate_noise([1.0], [2.0])


def test_estimate_noise_known_gaussian():
    rng = np.random.default_rng(3)
    i = rng.normal(20, 0.2, 20_000)
    v = rng.normal(12, 0.05, 20_000)
    e = estimate_noise(i, v)
    assert e.sigma_i == pytest.approx(0.2, rel=0.05)
    assert e.sigma_v == pytest.approx(0.05, rel=0.05)
    assert e.sigma_p == pytest.approx(sigma_power(20, 12, 0.2, 0.05), rel=0.05)
    assert e.cv == pytest.approx(e.sigma_p / np.mean(i * v))
    assert e.window_len == 20_000


def test_uncertainty_estimate_validation():
    with pytest.raises(ValueError):
        UncertaintyEstimate(-1, 0, 0, 0, 10, 1)
    with pytest.raises(ValueError):
        UncertaintyEstimate(0, 0, 0, 0, 1, 1)


def test_software_average_examples():
    x = np.array([1.0, 3.0, 5.0, 7.0])
    np.testing.assert_array_equal(software_average(x, 1), x)
    np.testing.assert_array_equal(software_average(x, 2), [2.0, 6.0])
    np.testing.assert_array_equal(software_average([1, 2, 3, 4, 5], 2), [1.5, 3.5])
    with pytest.raises(ValueError):
        software_average(x, 0)
    v, t = software_average(x, 2, timestamps=[10, 20, 30, 41])
    np.testing.assert_array_equal(t, [15, 35])


def test_sqrt_m_law():
    rng = np.random.default_rng(11)
    x = rng.normal(600, 3.0, 2500 * 400)
    y = software_average(x, 2500)
    assert y.std(ddof=1) / x.std(ddof=1) == pytest.approx(1 / 50, rel=0.15)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.integers(1, 20))
def test_average_preserves_mean(values, m):
    x = np.array(values)
    n = x.size // m
    assume(n > 0)
    y = software_average(x, m)
    assert y.mean() == pytest.approx(x[: n * m].mean(), rel=1e-9, abs=1e-6)


def _est(sigma_p, rate=50_000.0, mean_i=15.0):
    return UncertaintyEstimate(0, 0, sigma_p, sigma_p / 180, 1000, rate, mean_i, 12, 180)


def test_select_rate_examples():
    pol = AveragingPolicy()
    sel = select_rate(_est(1.73), pol)
    assert sel.rate == 1000 and not sel.precision_unmet
    assert predicted_sigma(1.73, 50_000, 25_000) == pytest.approx(1.223, abs=1e-3)
    assert select_rate(_est(0.4), pol).rate == 50_000
    tight = AveragingPolicy(sigma_target=1e-4)
    sel = select_rate(_est(1.73), tight)
    assert sel.rate == 1 and sel.precision_unmet


def test_select_rate_rescales_estimate_rate():
    pol = AveragingPolicy()
    # 0.245 W measured at 1 kHz is the same noise as 1.73 W at 50 kHz
    assert select_rate(_est(1.73 / math.sqrt(50), rate=1000), pol).rate == 1000


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10))
def test_select_rate_monotone_in_target(sigma, t1, t2):
    lo, hi = sorted((t1, t2))
    r_lo = select_rate(_est(sigma), AveragingPolicy(sigma_target=lo)).rate
    r_hi = select_rate(_est(sigma), AveragingPolicy(sigma_target=hi)).rate
    assert r_hi >= r_lo


def test_low_current_flag():
    assert select_rate(_est(1.0, mean_i=2.0), AveragingPolicy()).low_current
    assert not select_rate(_est(1.0, mean_i=15.0), AveragingPolicy()).low_current


def test_policy_validation():
    for kw in (dict(rate_ladder=(1000, 25_000)), dict(rate_ladder=(50_000, 50_000)), dict(sigma_target=0),
               dict(dwell=0), dict(rate_ladder=())):
        with pytest.raises(ValueError):
            AveragingPolicy(**kw)


def test_controller_hysteresis():
    c = RateController(AveragingPolicy(dwell=1.0))
    assert c.rate == 50_000
    assert c.update(_est(1.73), 0.0) == 50_000
    assert c.update(_est(1.73), 0.5) == 50_000
    assert c.update(_est(1.73), 1.0) == 1000 and c.switches == 1
    # a brief return of low noise does not switch back
    assert c.update(_est(0.3), 1.2) == 1000
    assert c.update(_est(1.73), 1.3) == 1000
    assert c.update(_est(0.3), 1.4) == 1000
    assert c.update(_est(0.3), 2.39) == 1000
    assert c.update(_est(0.3), 2.4) == 50_000 and c.switches == 2


def test_sigma_non_increasing_down_ladder():
    rng = np.random.default_rng(5)
    x = rng.normal(180, 1.73, 50_000 * 20)
    sig = [x.std()] + [software_average(x, int(50_000 / f)).std(ddof=1) for f in (25_000, 1000, 1)]
    assert all(a > b for a, b in zip(sig, sig[1:]))
