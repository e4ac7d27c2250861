"""Random-intercept logistic model: the joint log-density g and its derivatives.

For one site with rows (X_j, y_j) and random intercept mu ~ N(0, tau^2)::

    g(mu; beta, tau) = sum_j [y_j log pi_j + (1 - y_j) log(1 - pi_j)] + log phi(mu; tau)
    pi_j = sigmoid(X_j beta + mu)

Every function here is pure; arrays passed in are never modified.
"""

import logging

import numpy as np
from scipy.special import expit, log_expit

from src.models.domain import GDerivatives, SiteData
from src.models.schemas import Theta

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ModelError(Exception):
    """Base exception for numerical failures in the model services."""
    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class DimensionMismatchError(ModelError):
    """Raised when parameter and data dimensions disagree."""


def check_dimensions(site: SiteData, theta: Theta) -> None:
    if site.p != theta.p:
        raise DimensionMismatchError(
            f"Site {site.site_id} has p={site.p} covariates but beta has length {theta.p}"
        )


def sigmoid(x):
    """Overflow-safe logistic function, elementwise for arrays."""
    out = expit(np.asarray(x, dtype=float))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    """log(sigmoid(x)) without forming sigmoid(x)."""
    out = log_expit(np.asarray(x, dtype=float))
    return float(out) if out.ndim == 0 else out


def log_normal_density(mu: float, tau: float) -> float:
    """log phi(mu; tau) for the N(0, tau^2) random-effect density."""
    return -LOG_SQRT_2PI - np.log(tau) - 0.5 * (mu / tau) ** 2


def linear_predictor(site: SiteData, theta: Theta, mu: float) -> np.ndarray:
    return site.X @ theta.beta_array + mu


def g_value(site: SiteData, theta: Theta, mu: float) -> float:
    """Joint log-density of a site's outcomes and its random intercept at mu.

    Args:
        site: Rows held by the site
        theta: Current fixed effects and tau
        mu: Random-intercept value

    Returns:
        g(mu) as a float
    """
    check_dimensions(site, theta)
    eta = linear_predictor(site, theta, mu)
    # y log pi + (1-y) log(1-pi), with log(1 - sigmoid(z)) = log_sigmoid(-z)
    loglik = np.sum(site.y * log_sigmoid(eta) + (1.0 - site.y) * log_sigmoid(-eta))
    return float(loglik + log_normal_density(mu, theta.tau))


def g_derivs(site: SiteData, theta: Theta, mu: float) -> GDerivatives:
    """Analytic first and second derivatives of g at mu.

    Args:
        site: Rows held by the site
        theta: Current fixed effects and tau
        mu: Random-intercept value

    Returns:
        GDerivatives bundle (g_mu, g_mumu, g_beta, g_betabeta, g_mubeta, g_tau)
    """
    check_dimensions(site, theta)
    tau = theta.tau
    pi = sigmoid(linear_predictor(site, theta, mu))
    resid = site.y - pi
    v = pi * (1.0 - pi)
    X = site.X
    return GDerivatives(
        g_mu=float(np.sum(resid) - mu / tau ** 2),
        g_mumu=float(-np.sum(v) - 1.0 / tau ** 2),
        g_beta=X.T @ resid,
        g_betabeta=-(X.T * v) @ X,
        g_mubeta=-(X.T @ v),
        g_tau=float(mu ** 2 / tau ** 3 - 1.0 / tau),
    )
