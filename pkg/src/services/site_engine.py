"""Per-site computation: random-effect mode and the statistics a site transmits.

Derivatives of the local log marginal with respect to beta and tau are total
derivatives: the mode mu_hat and the scale omega_hat move with the parameters.
With c = -g_mumu(mu_hat) = sum v_j + 1/tau^2, v = pi(1 - pi), the implicit
function theorem on g_mu(mu_hat, beta) = 0 gives

    d mu_hat / d beta = -sum v_j X_j / c
    d omega_hat / d beta = -omega_hat * (d c / d beta) / (2 c)

and the second-order terms follow by differentiating those identities again.
Quadrature terms f_k are handled as log f_k and combined through normalized
weights w_k = f_k / sum f.
"""

import logging
import math
from typing import Optional

import numpy as np

from src.models.domain import ApproximationMethod, HermiteRule, RandomEffectMode, SiteData
from src.models.schemas import SiteSummary, Theta
from src.services.model_core import ModelError, check_dimensions, log_sigmoid, sigmoid
from src.services.quadrature import SQRT2, hermite_rule, log_sum_exp

logger = logging.getLogger(__name__)

MAX_MODE_ITERATIONS = 100
MAX_STEP_HALVINGS = 30
BISECTION_ITERATIONS = 400


class ModeNotFoundError(ModelError):
    """Raised when neither Newton nor the bisection fallback locates the mode."""


def _mode_tolerance(site: SiteData) -> float:
    return 1e-10 * max(1.0, float(site.n_i))


def _g_from_offsets(site: SiteData, xb: np.ndarray, tau: float, mu: float) -> float:
    eta = xb + mu
    return float(
        np.sum(site.y * log_sigmoid(eta) + (1.0 - site.y) * log_sigmoid(-eta))
        - 0.5 * math.log(2.0 * math.pi) - math.log(tau) - 0.5 * (mu / tau) ** 2
    )


def _g_mu_terms(site: SiteData, xb: np.ndarray, tau: float, mu: float):
    pi = sigmoid(xb + mu)
    return float(np.sum(site.y - pi) - mu / tau ** 2), float(-np.sum(pi * (1.0 - pi)) - 1.0 / tau ** 2)


def fit_random_effect(site: SiteData, theta: Theta, start: float = 0.0) -> RandomEffectMode:
    """Locate the mode of g for one site by damped Newton, with a bisection fallback.

    Args:
        site: Rows held by the site
        theta: Current parameters
        start: Initial mu (0 for a cold start, the previous mode for a warm start)

    Returns:
        RandomEffectMode with mu_hat, omega_hat and the curvature at the mode

    Raises:
        ModeNotFoundError: If the fallback bracket holds no root
    """
    check_dimensions(site, theta)
    tau = theta.tau
    xb = site.X @ theta.beta_array
    tol = _mode_tolerance(site)

    mu = float(start)
    g_cur = _g_from_offsets(site, xb, tau, mu)
    for iteration in range(MAX_MODE_ITERATIONS):
        g_mu, g_mumu = _g_mu_terms(site, xb, tau, mu)
        if abs(g_mu) < tol:
            return RandomEffectMode(mu_hat=mu, omega_hat=math.sqrt(-1.0 / g_mumu), g_mumu=g_mumu, iterations=iteration)
        step = -g_mu / g_mumu
        g_new = _g_from_offsets(site, xb, tau, mu + step)
        halvings = 0
        while g_new < g_cur and halvings < MAX_STEP_HALVINGS:
            step *= 0.5
            g_new = _g_from_offsets(site, xb, tau, mu + step)
            halvings += 1
        mu += step
        g_cur = g_new

    logger.warning(f"Site {site.site_id}: Newton did not locate the mode in {MAX_MODE_ITERATIONS} steps, bisecting")
    lo, hi = -50.0 * tau, 50.0 * tau
    if _g_mu_terms(site, xb, tau, lo)[0] < 0.0 or _g_mu_terms(site, xb, tau, hi)[0] > 0.0:
        raise ModeNotFoundError(f"Site {site.site_id}: g_mu does not change sign on [{lo}, {hi}]")
    for iteration in range(BISECTION_ITERATIONS):
        mu = 0.5 * (lo + hi)
        g_mu, g_mumu = _g_mu_terms(site, xb, tau, mu)
        if abs(g_mu) < tol:
            return RandomEffectMode(
                mu_hat=mu, omega_hat=math.sqrt(-1.0 / g_mumu), g_mumu=g_mumu,
                iterations=MAX_MODE_ITERATIONS + iteration,
            )
        if g_mu > 0.0:
            lo = mu
        else:
            hi = mu
    raise ModeNotFoundError(f"Site {site.site_id}: bisection did not reach |g_mu| < {tol}")


def penalty_mask(p: int, penalize_intercept: bool) -> np.ndarray:
    mask = np.ones(p)
    if not penalize_intercept:
        mask[0] = 0.0
    return mask


def site_summary(
    site: SiteData,
    theta: Theta,
    method: ApproximationMethod,
    lam: float,
    rule: Optional[HermiteRule] = None,
    penalize_intercept: bool = False,
    start: float = 0.0,
) -> SiteSummary:
    """Penalized local log-likelihood with its score, Hessian and tau-derivative.

    Args:
        site: Rows held by the site
        theta: Parameters broadcast for this round
        method: LA or GH(K)
        lam: Ridge weight lambda >= 0 subtracted as lam * ||beta||^2
        rule: Gauss-Hermite rule of order method.order (built if omitted)
        penalize_intercept: Include beta_0 in the penalty norm
        start: Starting point of the mode search

    Returns:
        SiteSummary for transmission to the coordinator

    Raises:
        ValueError: If lam is negative or the rule order does not match the method
        DimensionMismatchError: If beta and the data disagree in p
    """
    check_dimensions(site, theta)
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if rule is None:
        rule = hermite_rule(method.order)
    if rule.order != method.order:
        raise ValueError(f"Rule of order {rule.order} does not match method order {method.order}")

    X, y = site.X, site.y
    beta = theta.beta_array
    tau = theta.tau
    p = site.p
    xb = X @ beta

    mode = fit_random_effect(site, theta, start=start)
    mu_hat, omega = mode.mu_hat, mode.omega_hat

    # Sensitivities of the mode and of the curvature c = -g_mumu(mu_hat)
    pi = sigmoid(xb + mu_hat)
    v = pi * (1.0 - pi)
    v1 = v * (1.0 - 2.0 * pi)
    v2 = v - 6.0 * v ** 2
    c = float(np.sum(v) + 1.0 / tau ** 2)

    mu_b = -(X.T @ v) / c
    Z = X + mu_b
    mu_bb = -((Z.T * v1) @ Z) / c
    c_b = Z.T @ v1
    c_bb = (Z.T * v2) @ Z + np.sum(v1) * mu_bb

    lw_b = -0.5 * c_b / c
    lw_bb = -0.5 * (c_bb / c - np.outer(c_b, c_b) / c ** 2)
    om_b = omega * lw_b
    om_bb = omega * (lw_bb + np.outer(lw_b, lw_b))

    mu_t = (2.0 * mu_hat / tau ** 3) / c
    c_t = float(np.sum(v1)) * mu_t - 2.0 / tau ** 3
    lw_t = -0.5 * c_t / c
    om_t = omega * lw_t

    K = rule.order
    log_f = np.empty(K)
    s = np.empty((K, p))
    ds = np.empty((K, p, p))
    t = np.empty(K)
    for k, (x_k, log_h) in enumerate(zip(rule.nodes, rule.log_weights)):
        a = mu_hat + SQRT2 * omega * x_k
        eta = xb + a
        pi_k = sigmoid(eta)
        resid = y - pi_k
        v_k = pi_k * (1.0 - pi_k)

        g_k = _g_from_offsets(site, xb, tau, a)
        g_mu = float(np.sum(resid) - a / tau ** 2)
        g_mumu = float(-np.sum(v_k) - 1.0 / tau ** 2)
        g_b = X.T @ resid
        g_bb = -(X.T * v_k) @ X
        g_mb = -(X.T @ v_k)
        g_t = a ** 2 / tau ** 3 - 1.0 / tau

        a_b = mu_b + SQRT2 * x_k * om_b
        a_bb = mu_bb + SQRT2 * x_k * om_bb
        a_t = mu_t + SQRT2 * x_k * om_t

        log_f[k] = log_h + x_k ** 2 + g_k
        s[k] = g_b + g_mu * a_b
        ds[k] = g_bb + np.outer(g_mb, a_b) + np.outer(a_b, g_mb) + g_mumu * np.outer(a_b, a_b) + g_mu * a_bb
        t[k] = g_t + g_mu * a_t

    lse = log_sum_exp(log_f)
    w = np.exp(log_f - lse)
    s_bar = w @ s

    log_marginal = math.log(SQRT2 * omega) + lse
    score = lw_b + s_bar
    hessian = lw_bb + np.einsum("k,kij->ij", w, ds) + (s.T * w) @ s - np.outer(s_bar, s_bar)
    dtau = lw_t + float(w @ t)

    mask = penalty_mask(p, penalize_intercept)
    loglik = log_marginal - lam * float(np.sum(mask * beta ** 2))
    score = score - 2.0 * lam * mask * beta
    hessian = hessian - 2.0 * lam * np.diag(mask)
    hessian = 0.5 * (hessian + hessian.T)

    return SiteSummary(
        site_id=site.site_id,
        p=p,
        score=score.tolist(),
        hessian=hessian.tolist(),
        loglik=float(loglik),
        mu_hat=float(mu_hat),
        omega_hat=float(omega),
        dtau=float(dtau),
        n_i=site.n_i,
        beta_echo=list(theta.beta),
        tau_echo=float(tau),
        lambda_echo=float(lam),
        k_echo=K,
    )


class SiteEngine:
    """Stateful wrapper a site keeps across rounds: the warm-start cache of mu_hat."""

    def __init__(
        self,
        site: SiteData,
        method: ApproximationMethod,
        lam: float = 0.0,
        penalize_intercept: bool = False,
        warm_start: bool = True,
    ):
        """Initialize the engine for one site.

        Args:
            site: Rows held by the site
            method: LA or GH(K)
            lam: Ridge weight
            penalize_intercept: Include the intercept in the penalty
            warm_start: Start each mode search at the previous mu_hat
        """
        self.site = site
        self.method = method
        self.rule = hermite_rule(method.order)
        self.lam = lam
        self.penalize_intercept = penalize_intercept
        self.warm_start = warm_start
        self._last_mu: Optional[float] = None

    def configure(self, method: ApproximationMethod, lam: float, penalize_intercept: bool) -> None:
        self.method = method
        self.rule = hermite_rule(method.order)
        self.lam = lam
        self.penalize_intercept = penalize_intercept
        self._last_mu = None

    def summarize(self, theta: Theta) -> SiteSummary:
        start = self._last_mu if (self.warm_start and self._last_mu is not None) else 0.0
        summary = site_summary(
            self.site, theta, self.method, self.lam, self.rule,
            penalize_intercept=self.penalize_intercept, start=start,
        )
        self._last_mu = summary.mu_hat
        logger.debug(
            f"Site {self.site.site_id}: loglik={summary.loglik:.6f} mu_hat={summary.mu_hat:.6f} "
            f"dtau={summary.dtau:.6f}"
        )
        return summary
