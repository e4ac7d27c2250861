"""Tests for Hermite rules and the log marginal approximations."""

import math

import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.special import logsumexp

from src.models.domain import RandomEffectMode
from src.models.schemas import Theta
from src.services.model_core import LOG_SQRT_2PI, g_value, log_sigmoid
from src.services.quadrature import (
    InvalidModeError, OrderTooLargeError, gauss_hermite_log_integral, hermite_polynomial,
    hermite_rule, laplace_log_integral, log_marginal_gh, log_marginal_la, log_sum_exp,
    quadrature_points,
)
from src.services.site_engine import fit_random_effect
from tests.conftest import make_site, random_theta


@pytest.mark.parametrize("k, x, expected", [
    (0, 0.7, 1.0),
    (1, 0.7, 1.4),
    (2, 1.0, 2.0),
    (3, 1.0, -4.0),
    (4, 0.0, 12.0),
    (5, 2.0, -16.0),
])
def test_hermite_polynomial_values(k, x, expected):
    assert hermite_polynomial(k, x) == pytest.approx(expected)


def test_hermite_polynomial_vectorized():
    x = np.array([-1.0, 0.0, 1.0])
    np.testing.assert_allclose(hermite_polynomial(2, x), 4.0 * x ** 2 - 2.0)


def test_hermite_polynomial_order_guard():
    with pytest.raises(OrderTooLargeError):
        hermite_polynomial(51, 0.3)
    with pytest.raises(ValueError):
        hermite_polynomial(-1, 0.3)


def test_order_two_rule_closed_form():
    rule = hermite_rule(2)
    np.testing.assert_allclose(rule.nodes, [-1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)], atol=1e-14)
    np.testing.assert_allclose(rule.weights, [math.sqrt(math.pi) / 2.0] * 2, rtol=1e-14)


def test_order_one_rule():
    rule = hermite_rule(1)
    np.testing.assert_allclose(rule.nodes, [0.0])
    np.testing.assert_allclose(rule.weights, [math.sqrt(math.pi)], rtol=1e-14)


@pytest.mark.parametrize("K", [1, 2, 3, 4, 5, 8, 12, 16, 20])
def test_rule_matches_numpy_hermgauss(K):
    nodes, weights = np.polynomial.hermite.hermgauss(K)
    rule = hermite_rule(K)
    np.testing.assert_allclose(rule.nodes, nodes, atol=1e-12)
    np.testing.assert_allclose(rule.weights, weights, rtol=1e-8)


@pytest.mark.parametrize("K", [1, 2, 5, 10, 20])
def test_rule_structure(K):
    rule = hermite_rule(K)
    assert np.all(np.diff(rule.nodes) > 0.0)
    np.testing.assert_allclose(rule.nodes, -rule.nodes[::-1], atol=1e-14)
    np.testing.assert_allclose(rule.weights, rule.weights[::-1], rtol=1e-12)
    assert np.all(rule.weights > 0.0)
    assert rule.weights.sum() == pytest.approx(math.sqrt(math.pi), rel=1e-12)


@pytest.mark.parametrize("K", [3, 5, 10])
def test_rule_integrates_gaussian_moments(K):
    rule = hermite_rule(K)
    sqrt_pi = math.sqrt(math.pi)
    assert np.sum(rule.weights * rule.nodes ** 2) == pytest.approx(sqrt_pi / 2.0, rel=1e-12)
    assert np.sum(rule.weights * rule.nodes ** 4) == pytest.approx(3.0 * sqrt_pi / 4.0, rel=1e-12)


def test_rule_is_cached_and_read_only():
    assert hermite_rule(6) is hermite_rule(6)
    with pytest.raises(ValueError):
        hermite_rule(6).nodes[0] = 1.0


@pytest.mark.parametrize("K", [0, 21])
def test_rule_order_bounds(K):
    with pytest.raises(OrderTooLargeError):
        hermite_rule(K)


def test_log_sum_exp_matches_scipy(rng):
    values = rng.normal(scale=50.0, size=30)
    assert log_sum_exp(values) == pytest.approx(float(logsumexp(values)), rel=1e-14)
    assert log_sum_exp([-1e4, -1e4]) == pytest.approx(-1e4 + math.log(2.0))
    assert log_sum_exp([-np.inf, -np.inf]) == -np.inf
    with pytest.raises(ValueError):
        log_sum_exp([])


@pytest.mark.parametrize("center, scale", [(0.0, 1.0), (2.5, 0.3), (-4.0, 3.0)])
@pytest.mark.parametrize("K", [1, 2, 7])
def test_gaussian_log_density_is_integrated_exactly(center, scale, K):
    def log_density(mu):
        return -0.5 * ((mu - center) / scale) ** 2

    mode = RandomEffectMode(mu_hat=center, omega_hat=scale, g_mumu=-1.0 / scale ** 2)
    exact = math.log(math.sqrt(2.0 * math.pi) * scale)
    assert laplace_log_integral(log_density, mode) == pytest.approx(exact, abs=1e-12)
    assert gauss_hermite_log_integral(log_density, mode, hermite_rule(K)) == pytest.approx(exact, abs=1e-12)


def test_order_one_equals_laplace(rng):
    for _ in range(200):
        site = make_site(rng, int(rng.integers(1, 31)), int(rng.integers(1, 5)))
        theta = random_theta(rng, site.p)
        mode = fit_random_effect(site, theta)
        la = log_marginal_la(site, theta, mode)
        gh1 = log_marginal_gh(site, theta, mode, hermite_rule(1))
        assert gh1 == pytest.approx(la, abs=1e-12)


def test_quadrature_points_are_affine_in_the_nodes():
    mode = RandomEffectMode(mu_hat=1.5, omega_hat=0.25, g_mumu=-16.0)
    rule = hermite_rule(3)
    np.testing.assert_allclose(quadrature_points(mode, rule), 1.5 + math.sqrt(2.0) * 0.25 * rule.nodes)


def _log_integrand(site, theta, grid):
    eta = (site.X @ theta.beta_array)[:, None] + grid[None, :]
    y = site.y[:, None]
    loglik = np.sum(y * log_sigmoid(eta) + (1.0 - y) * log_sigmoid(-eta), axis=0)
    return loglik - LOG_SQRT_2PI - math.log(theta.tau) - 0.5 * (grid / theta.tau) ** 2


def _simpson_log_marginal(site, theta, mode, half_width=12.0, panels=100_000):
    grid = np.linspace(mode.mu_hat - half_width * mode.omega_hat, mode.mu_hat + half_width * mode.omega_hat, panels + 1)
    log_f = _log_integrand(site, theta, grid)
    shift = log_f.max()
    return shift + math.log(simpson(np.exp(log_f - shift), x=grid))


def _simpson_sites(count=50):
    rng = np.random.default_rng(2024)
    for _ in range(count):
        site = make_site(rng, 5, 2)
        theta = random_theta(rng, 2)
        mode = fit_random_effect(site, theta)
        yield site, theta, mode, _simpson_log_marginal(site, theta, mode)


def test_vectorized_integrand_matches_g_value(rng):
    site = make_site(rng, 5, 2)
    theta = random_theta(rng, 2)
    grid = np.linspace(-4.0, 4.0, 9)
    expected = [g_value(site, theta, mu) for mu in grid]
    np.testing.assert_allclose(_log_integrand(site, theta, grid), expected, rtol=1e-12, atol=1e-12)


def test_high_order_rules_match_dense_simpson_on_fifty_sites():
    errors = {1: [], 8: [], 10: [], 20: []}
    for site, theta, mode, reference in _simpson_sites():
        for k in errors:
            errors[k].append(abs(log_marginal_gh(site, theta, mode, hermite_rule(k)) - reference))
        assert errors[8][-1] <= errors[1][-1] + 1e-12
    assert len(errors[20]) == 50
    assert max(errors[10]) < 2e-5
    assert max(errors[20]) < 1e-8


def test_large_site_stays_finite(rng):
    site = make_site(rng, 5000, 3)
    theta = random_theta(rng, 3)
    mode = fit_random_effect(site, theta)
    la = log_marginal_la(site, theta, mode)
    gh = log_marginal_gh(site, theta, mode, hermite_rule(10))
    assert np.isfinite(la) and np.isfinite(gh)
    assert la < -100.0
    assert gh == pytest.approx(la, abs=0.05)


def test_non_negative_curvature_is_rejected():
    bad = RandomEffectMode(mu_hat=0.0, omega_hat=1.0, g_mumu=0.0)
    with pytest.raises(InvalidModeError):
        laplace_log_integral(lambda mu: -mu * mu, bad)
    with pytest.raises(InvalidModeError):
        gauss_hermite_log_integral(lambda mu: -mu * mu, bad, hermite_rule(2))


def test_theta_constructor_in_tests_is_finite():
    with pytest.raises(ValueError):
        Theta(beta=[float("nan")], tau=1.0)
