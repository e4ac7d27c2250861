"""Gauss-Hermite rules and log-space marginal likelihood approximations.

The marginal of one site is the one-dimensional integral of exp(g(mu)). Both
approximations recentre at the mode mu_hat and rescale by
omega_hat = sqrt(-1/g_mumu(mu_hat)):

    Laplace:  g(mu_hat) + log(sqrt(2 pi) omega_hat)
    GH(K):    log(sqrt(2) omega_hat) + LSE_k [log h_k + x_k^2 + g(mu_hat + sqrt(2) omega_hat x_k)]

With K=1 (x_1 = 0, h_1 = sqrt(pi)) the two coincide. Values stay in log space
throughout; raw likelihoods underflow for large sites.
"""

import logging
import math
from functools import lru_cache
from typing import Callable

import numpy as np

from src.models.domain import HermiteRule, RandomEffectMode, SiteData
from src.models.schemas import Theta
from src.services.model_core import ModelError, g_value

logger = logging.getLogger(__name__)

MAX_POLYNOMIAL_ORDER = 50
MAX_RULE_ORDER = 20
SQRT2 = math.sqrt(2.0)
LOG_2PI_HALF = 0.5 * math.log(2.0 * math.pi)


class OrderTooLargeError(ModelError):
    """Raised when a Hermite order exceeds the supported range."""


class RootFindingError(ModelError):
    """Raised when a Hermite root bracket does not change sign."""


class InvalidModeError(ModelError):
    """Raised when the supplied mode has non-negative curvature."""


def hermite_polynomial(k: int, x):
    """Physicists' Hermite polynomial H_k(x) by three-term recurrence.

    Args:
        k: Non-negative order, at most 50
        x: Scalar or array argument

    Returns:
        H_k evaluated at x (same shape as x)

    Raises:
        OrderTooLargeError: If k exceeds the recurrence guard
    """
    if k < 0:
        raise ValueError(f"Hermite order must be non-negative, got {k}")
    if k > MAX_POLYNOMIAL_ORDER:
        raise OrderTooLargeError(f"Hermite order {k} exceeds the supported maximum {MAX_POLYNOMIAL_ORDER}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if k == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = 2.0 * x
    for j in range(1, k):
        h_prev, h = h, 2.0 * x * h - 2.0 * j * h_prev
    return h if h.ndim else float(h)


def _safeguarded_newton(k: int, lo: float, hi: float, tol: float = 1e-15, max_iter: int = 200) -> float:
    """Root of H_k inside [lo, hi], Newton steps falling back to bisection."""
    f_lo = hermite_polynomial(k, lo)
    f_hi = hermite_polynomial(k, hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise RootFindingError(f"H_{k} does not change sign on [{lo}, {hi}]")

    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f = hermite_polynomial(k, x)
        if f == 0.0:
            return x
        if np.sign(f) == np.sign(f_lo):
            lo, f_lo = x, f
        else:
            hi = x
        # H_k' = 2k H_{k-1}
        df = 2.0 * k * hermite_polynomial(k - 1, x)
        step_ok = df != 0.0
        if step_ok:
            x_new = x - f / df
            step_ok = lo < x_new < hi
        if not step_ok:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(1.0, abs(x)):
            return x_new
        x = x_new
    raise RootFindingError(f"Root of H_{k} in [{lo}, {hi}] did not converge")


def _hermite_roots(K: int) -> np.ndarray:
    """Roots of H_K, built up from the interlacing roots of lower orders."""
    roots = np.array([0.0])
    for k in range(2, K + 1):
        bound = math.sqrt(2.0 * k + 1.0)
        edges = np.concatenate(([-bound], roots, [bound]))
        roots = np.array([_safeguarded_newton(k, edges[i], edges[i + 1]) for i in range(k)])
    return roots


@lru_cache(maxsize=None)
def hermite_rule(K: int) -> HermiteRule:
    """Gauss-Hermite nodes and weights of order K.

    Weights follow h_k = 2^{K-1} K! sqrt(pi) / (K^2 [H_{K-1}(x_k)]^2),
    evaluated in log space.

    Args:
        K: Number of nodes, 1 <= K <= 20

    Returns:
        Immutable HermiteRule

    Raises:
        OrderTooLargeError: If K is outside [1, 20]
    """
    if not 1 <= K <= MAX_RULE_ORDER:
        raise OrderTooLargeError(f"Gauss-Hermite order must be in [1, {MAX_RULE_ORDER}], got {K}")

    nodes = _hermite_roots(K)
    nodes = 0.5 * (nodes - nodes[::-1])

    log_h = np.array([
        (K - 1) * math.log(2.0) + math.lgamma(K + 1) + 0.5 * math.log(math.pi)
        - 2.0 * math.log(K) - 2.0 * math.log(abs(hermite_polynomial(K - 1, x)))
        for x in nodes
    ])
    weights = np.exp(log_h)
    weights = 0.5 * (weights + weights[::-1])

    nodes.setflags(write=False)
    weights.setflags(write=False)
    logger.debug(f"Built Gauss-Hermite rule of order {K}")
    return HermiteRule(order=K, nodes=nodes, weights=weights)


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) shifted by the maximum.

    Raises:
        ValueError: If values is empty
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp requires at least one value")
    a = np.max(v)
    if not np.isfinite(a):
        return float(a)
    return float(a + np.log(np.sum(np.exp(v - a))))


def _check_mode(mode: RandomEffectMode) -> None:
    if not mode.g_mumu < 0.0 or not np.isfinite(mode.omega_hat) or mode.omega_hat <= 0.0:
        raise InvalidModeError(
            f"Curvature at the mode must be strictly negative (g_mumu={mode.g_mumu}, omega={mode.omega_hat})"
        )


def quadrature_points(mode: RandomEffectMode, rule: HermiteRule) -> np.ndarray:
    """Adaptive nodes mu_hat + sqrt(2) omega_hat x_k."""
    return mode.mu_hat + SQRT2 * mode.omega_hat * rule.nodes


def laplace_log_integral(log_density: Callable[[float], float], mode: RandomEffectMode) -> float:
    """Laplace approximation of log of the integral of exp(log_density)."""
    _check_mode(mode)
    return log_density(mode.mu_hat) + LOG_2PI_HALF - 0.5 * math.log(-mode.g_mumu)


def gauss_hermite_log_integral(
    log_density: Callable[[float], float],
    mode: RandomEffectMode,
    rule: HermiteRule,
) -> float:
    """Adaptive Gauss-Hermite approximation of log of the integral of exp(log_density)."""
    _check_mode(mode)
    points = quadrature_points(mode, rule)
    terms = rule.log_weights + rule.nodes ** 2 + np.array([log_density(a) for a in points])
    return math.log(SQRT2 * mode.omega_hat) + log_sum_exp(terms)


def log_marginal_la(site: SiteData, theta: Theta, mode: RandomEffectMode) -> float:
    """Laplace log marginal likelihood of one site at theta."""
    return laplace_log_integral(lambda mu: g_value(site, theta, mu), mode)


def log_marginal_gh(site: SiteData, theta: Theta, mode: RandomEffectMode, rule: HermiteRule) -> float:
    """Adaptive Gauss-Hermite log marginal likelihood of one site at theta."""
    return gauss_hermite_log_integral(lambda mu: g_value(site, theta, mu), mode, rule)
