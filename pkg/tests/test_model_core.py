"""Tests for the joint log-density g and its analytic derivatives."""

import math

import numpy as np
import pytest

from src.models.domain import SiteData
from src.models.schemas import Theta
from src.services.model_core import (
    DimensionMismatchError, g_derivs, g_value, log_sigmoid, sigmoid,
)
from tests.conftest import make_site, random_theta


def test_sigmoid_reference_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)


def test_sigmoid_extremes_do_not_overflow():
    tiny = sigmoid(-745.0)
    assert 0.0 <= tiny < 1e-300
    assert sigmoid(745.0) == 1.0
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))


def test_sigmoid_symmetry():
    x = np.linspace(-40.0, 40.0, 401)
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


def test_log_sigmoid_matches_log1p_form():
    x = np.linspace(-30.0, 30.0, 121)
    np.testing.assert_allclose(log_sigmoid(x), -np.log1p(np.exp(-x)), rtol=1e-12)
    assert np.isfinite(log_sigmoid(-800.0))


def test_g_value_one_row(one_row_site):
    theta = Theta(beta=[0.0], tau=1.0)
    expected = math.log(0.5) - 0.5 * math.log(2.0 * math.pi)
    assert g_value(one_row_site, theta, 0.0) == pytest.approx(expected, abs=1e-12)
    assert g_value(one_row_site, theta, 0.0) == pytest.approx(-1.612085, abs=1e-6)


def test_g_value_all_half_probabilities(site_factory):
    site = site_factory(n=17, p=2)
    tau = 1.7
    theta = Theta(beta=[0.0, 0.0], tau=tau)
    expected = 17 * math.log(0.5) - 0.5 * math.log(2.0 * math.pi) - math.log(tau)
    assert g_value(site, theta, 0.0) == pytest.approx(expected, abs=1e-12)


def test_g_value_decreases_in_the_tails(site_factory):
    site = site_factory(n=10, p=3)
    theta = Theta(beta=[0.1, -0.2, 0.3], tau=1.0)
    values = [g_value(site, theta, mu) for mu in (20.0, 40.0, 80.0)]
    assert values[0] > values[1] > values[2]
    values = [g_value(site, theta, mu) for mu in (-20.0, -40.0, -80.0)]
    assert values[0] > values[1] > values[2]


def test_g_value_row_permutation_invariant(rng, site_factory):
    site = site_factory(n=12, p=3)
    theta = random_theta(rng, 3)
    perm = rng.permutation(site.n_i)
    shuffled = SiteData(site_id=site.site_id, X=site.X[perm], y=site.y[perm])
    assert g_value(shuffled, theta, 0.3) == pytest.approx(g_value(site, theta, 0.3), abs=1e-12)


def test_g_derivs_one_row(one_row_site):
    d = g_derivs(one_row_site, Theta(beta=[0.0], tau=1.0), 0.0)
    assert d.g_mu == pytest.approx(0.5)
    assert d.g_mumu == pytest.approx(-1.25)
    np.testing.assert_allclose(d.g_beta, [0.5])
    np.testing.assert_allclose(d.g_mubeta, [-0.25])
    assert d.g_tau == pytest.approx(-1.0)


def test_g_tau_at_zero_mu(site_factory):
    site = site_factory(n=5, p=2)
    d = g_derivs(site, Theta(beta=[0.2, 0.1], tau=2.5), 0.0)
    assert d.g_tau == pytest.approx(-1.0 / 2.5)


def _fd(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)


@pytest.mark.parametrize("seed", range(10))
def test_g_derivs_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 5))
    site = make_site(rng, int(rng.integers(1, 11)), p)
    theta = random_theta(rng, p)
    beta, tau = theta.beta_array, theta.tau
    mu = float(rng.normal())
    d = g_derivs(site, theta, mu)

    def step(x):
        return 1e-6 * max(1.0, abs(x))

    def g_at(b=beta, t=tau, m=mu):
        return g_value(site, Theta.from_arrays(b, t), m)

    assert d.g_mu == pytest.approx(_fd(lambda m: g_at(m=m), mu, step(mu)), rel=1e-6, abs=1e-7)
    assert d.g_mumu == pytest.approx(
        _fd(lambda m: g_derivs(site, theta, m).g_mu, mu, step(mu)), rel=1e-6, abs=1e-7)
    assert d.g_tau == pytest.approx(_fd(lambda t: g_at(t=t), tau, step(tau)), rel=1e-6, abs=1e-7)

    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        h = step(beta[j])
        assert d.g_beta[j] == pytest.approx(_fd(lambda s: g_at(b=beta + s * e), 0.0, h), rel=1e-6, abs=1e-7)
        assert d.g_mubeta[j] == pytest.approx(
            _fd(lambda s: g_derivs(site, Theta.from_arrays(beta + s * e, tau), mu).g_mu, 0.0, h),
            rel=1e-6, abs=1e-7)
        column = (g_derivs(site, Theta.from_arrays(beta + h * e, tau), mu).g_beta
                  - g_derivs(site, Theta.from_arrays(beta - h * e, tau), mu).g_beta) / (2.0 * h)
        np.testing.assert_allclose(d.g_betabeta[:, j], column, rtol=1e-6, atol=1e-7)


def test_g_mumu_strictly_negative(rng):
    for _ in range(20):
        site = make_site(rng, 8, 3)
        theta = random_theta(rng, 3)
        for mu in (-30.0, 0.0, 30.0):
            assert g_derivs(site, theta, mu).g_mumu < 0.0


def test_dimension_mismatch_raises(site_factory):
    site = site_factory(n=4, p=3)
    with pytest.raises(DimensionMismatchError):
        g_value(site, Theta(beta=[0.0, 0.0], tau=1.0), 0.0)


def test_site_data_validation():
    with pytest.raises(ValueError):
        SiteData(site_id=1, X=np.array([[2.0, 1.0]]), y=np.array([1.0]))
    with pytest.raises(ValueError):
        SiteData(site_id=1, X=np.array([[1.0, 1.0]]), y=np.array([0.5]))
    with pytest.raises(ValueError):
        SiteData(site_id=1, X=np.ones((0, 2)), y=np.ones(0))
