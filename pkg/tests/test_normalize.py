import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize

from cardecon.normalize import (
    LOGNORMAL,
    NORMAL,
    QUANTILE_EPS,
    DegenerateDistributionError,
    FittedDistribution,
    InsufficientDataError,
    NormalizationError,
    fit_columns,
    fit_distribution,
    fit_lognormal,
    fit_normal,
    from_quantile,
    to_quantile,
)

from oracles import mle_family, normal_loglik_sum


def test_closed_form_mle():
    x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    n = fit_normal(x)
    assert n.mu == pytest.approx(6.2)
    assert n.sigma == pytest.approx(math.sqrt(np.mean((x - 6.2) ** 2)))
    ln = fit_lognormal(x)
    assert ln.mu == pytest.approx(2 * math.log(2))
    assert ln.sigma == pytest.approx(math.log(2) * math.sqrt(2))
    assert n.log_likelihood == pytest.approx(normal_loglik_sum(x, n.mu, n.sigma), rel=1e-13)


def test_family_choice_examples():
    rng = np.random.default_rng(1)
    assert fit_distribution(rng.lognormal(0, 1, 500)).family == LOGNORMAL
    assert fit_distribution(rng.normal(0, 1, 500)).family == NORMAL
    assert fit_distribution([-1.0, 2.0, 3.0, 5.0]).family == NORMAL


def test_errors():
    with pytest.raises(InsufficientDataError):
        fit_distribution([1.0, 2.0])
    with pytest.raises(DegenerateDistributionError):
        fit_distribution([3.0, 3.0, 3.0])
    with pytest.raises(NormalizationError):
        fit_lognormal([1.0, -2.0, 3.0])
    with pytest.raises(NormalizationError, match="col_b"):
        fit_columns(np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]]), ["col_a", "col_b"])
    d = FittedDistribution(LOGNORMAL, 0.0, 1.0, 0.0, 3)
    with pytest.raises(NormalizationError):
        to_quantile(0.0, d)
    with pytest.raises(NormalizationError):
        from_quantile(1.0, d)


def test_quantile_clamped():
    d = FittedDistribution(NORMAL, 0.0, 1.0, 0.0, 3)
    assert to_quantile(1e6, d) == 1 - QUANTILE_EPS
    assert to_quantile(-1e6, d) == QUANTILE_EPS
    assert to_quantile(0.0, d) == 0.5


@pytest.mark.parametrize("family", [NORMAL, LOGNORMAL])
def test_cdf_matches_quadrature(family):
    d = FittedDistribution(family, 0.3, 0.7, 0.0, 3)
    lo = -np.inf if family == NORMAL else 0.0
    for x in (0.1, 0.9, 1.7, 3.0):
        area, _ = integrate.quad(lambda t: float(d.pdf(t)), lo, x, epsabs=1e-14, epsrel=1e-13)
        assert d.cdf(x) == pytest.approx(area, abs=1e-10)


@pytest.mark.parametrize("family", [NORMAL, LOGNORMAL])
def test_ppf_matches_root_finding(family):
    d = FittedDistribution(family, 0.3, 0.7, 0.0, 3)
    for p in (1e-5, 0.1, 0.5, 0.77, 0.99999):
        root = optimize.brentq(lambda t: float(d.cdf(t)) - p, 1e-12 if family == LOGNORMAL else -50, 200,
                               xtol=1e-14, rtol=1e-14)
        assert from_quantile(p, d) == pytest.approx(root, rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1e4), min_size=3, max_size=40).filter(lambda v: np.ptp(v) > 1e-6))
def test_family_selection_property(x):
    assert fit_distribution(x).family == mle_family(x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 3), st.lists(st.floats(-8, 8), min_size=2, max_size=20))
def test_quantile_monotone(mu, sigma, xs):
    d = FittedDistribution(NORMAL, mu, sigma, 0.0, 3)
    xs = np.sort(np.asarray(xs))
    q = to_quantile(xs, d)
    assert np.all(np.diff(q) >= 0)
    assert np.all((q >= QUANTILE_EPS) & (q <= 1 - QUANTILE_EPS))


@pytest.mark.parametrize("family", [NORMAL, LOGNORMAL])
def test_round_trip_probes(family):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        mu, sigma = rng.normal(0, 3), rng.uniform(0.05, 2.0)
        d = FittedDistribution(family, mu, sigma, 0.0, 3)
        x = d.ppf(rng.uniform(QUANTILE_EPS, 1 - QUANTILE_EPS, 1000))
        back = from_quantile(to_quantile(x, d), d)
        scale = np.abs(x) if family == LOGNORMAL else np.maximum(np.abs(x), sigma)
        worst = max(worst, float(np.max(np.abs(back - x) / scale)))
    assert worst <= 1e-9
