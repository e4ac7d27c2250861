"""Coordinator control loop: lambda sweep, global Newton on beta, ascent on tau.

The objective is a sum of site terms, so every aggregate below is a plain sum
of the SiteSummary payloads, taken in ascending site_id order so that the
floating-point result does not depend on arrival order.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import erfc

from src.models.domain import ApproximationMethod, MethodKind, SiteData
from src.models.schemas import (
    CandidateResult, ConvergenceConfig, FitResult, ModelConfig, SiteSummary, Theta, TrajectoryPoint,
)
from src.services.model_core import ModelError, sigmoid
from src.services.site_engine import fit_random_effect, penalty_mask

logger = logging.getLogger(__name__)

Z_975 = 1.959964
ASCENT_TOLERANCE = 1e-9
# Intercept curvature below this fraction of the largest diagonal curvature counts as flat
FLAT_CURVATURE = 1e-10


class ConvergenceError(Exception):
    """Raised when damping escalation reaches its cap without an ascent step."""
    def __init__(self, message: str, round_index: Optional[int] = None):
        self.message = message
        self.round_index = round_index
        super().__init__(self.message)


class FitFailedError(Exception):
    """Raised when no lambda candidate converged; carries a non-converged result with diagnostics."""
    def __init__(self, message: str, partial: FitResult):
        self.message = message
        self.partial = partial
        super().__init__(self.message)


class CandidateFailedError(Exception):
    """Raised when a lambda candidate stops on an error; carries the iterate reached."""
    def __init__(self, message: str, run: "_CandidateRun"):
        self.message = message
        self.run = run
        super().__init__(self.message)


class InferenceUnavailableError(Exception):
    """Raised when -H cannot be inverted at the estimate."""
    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class SummaryProvider(Protocol):
    """Source of per-round site summaries (in-process or over the network)."""

    p: int

    def site_ids(self) -> List[int]: ...

    def observations(self, partition: str = "train") -> int: ...

    def configure(self, method: ApproximationMethod, lam: float, penalize_intercept: bool) -> None: ...

    def collect(self, theta: Theta, partition: str = "train") -> List[SiteSummary]: ...


Evaluator = Callable[[Theta], List[SiteSummary]]


@dataclass
class StepDiagnostics:
    """What a global Newton step did."""
    damping: float
    fallback: bool
    attempts: int
    summaries: Optional[List[SiteSummary]] = None


@dataclass
class _CandidateRun:
    lam: float
    theta: Theta
    summaries: List[SiteSummary]
    converged: bool
    iterations: int
    final_delta: float
    trajectory: List[TrajectoryPoint] = field(default_factory=list)


def _ordered(summaries: Sequence[SiteSummary]) -> List[SiteSummary]:
    return sorted(summaries, key=lambda s: s.site_id)


def total_loglik(summaries: Sequence[SiteSummary]) -> float:
    return float(sum(s.loglik for s in _ordered(summaries)))


def aggregate(summaries: Sequence[SiteSummary]) -> Tuple[np.ndarray, np.ndarray]:
    """Sum scores and Hessians over sites in ascending site_id order."""
    ordered = _ordered(summaries)
    if not ordered:
        raise ValueError("No site summaries to aggregate")
    p = ordered[0].p
    if any(s.p != p for s in ordered):
        raise ValueError("Site summaries disagree in p")
    S = np.zeros(p)
    H = np.zeros((p, p))
    for s in ordered:
        S = S + s.score_array
        H = H + s.hessian_array
    return S, H


def _damped_solve(H: np.ndarray, S: np.ndarray, delta: float) -> Optional[np.ndarray]:
    """Solve (-H + delta I) step = S; None when the system is singular to machine precision."""
    A = -H + delta * np.eye(H.shape[0])
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1.0 / np.finfo(float).eps:
        return None
    try:
        return np.linalg.solve(A, S)
    except np.linalg.LinAlgError:
        return None


def flat_intercept(H: np.ndarray) -> bool:
    """True when the intercept has no usable curvature in the aggregated Hessian.

    With a near-flat random-intercept prior every site mode absorbs a shift of
    the intercept, so the objective does not move along that coordinate.
    """
    curvature = np.abs(np.diag(H))
    if curvature.size < 2:
        return False
    scale = float(np.max(curvature))
    return scale > 0.0 and curvature[0] <= FLAT_CURVATURE * scale


def global_newton_step(
    summaries: Sequence[SiteSummary],
    theta: Theta,
    cfg: ConvergenceConfig,
    evaluate: Optional[Evaluator] = None,
    round_index: int = 0,
) -> Tuple[Theta, StepDiagnostics]:
    """One damped Newton update of beta from aggregated site statistics.

    The undamped step is tried first; when the system is singular or the step
    fails to increase the summed log-likelihood, the damping grows geometrically.
    When the intercept direction is flat (see flat_intercept) the intercept is held
    and the step is solved over the remaining coefficients.

    Args:
        summaries: Site summaries computed at theta
        theta: Current parameters
        cfg: Damping schedule
        evaluate: Follow-up summary round at a trial point (acceptance check is
            skipped when omitted)
        round_index: Round number used in error messages

    Returns:
        Tuple of the updated parameters and step diagnostics

    Raises:
        ConvergenceError: If the damping cap is exceeded
    """
    S, H = aggregate(summaries)
    if S.shape[0] != theta.p:
        raise ValueError(f"Summaries have p={S.shape[0]} but theta has p={theta.p}")
    base = total_loglik(summaries)
    beta = theta.beta_array
    free = slice(1, None) if flat_intercept(H) else slice(None)
    if free.start == 1:
        logger.debug(f"Round {round_index}: intercept direction is flat, holding it")

    delta = 0.0
    attempts = 0
    while True:
        attempts += 1
        solved = _damped_solve(H[free, free], S[free], delta)
        if solved is not None:
            step = np.zeros_like(beta)
            step[free] = solved
            candidate = Theta.from_arrays(beta + step, theta.tau)
            if evaluate is None:
                return candidate, StepDiagnostics(damping=delta, fallback=delta > 0.0, attempts=attempts)
            trial = evaluate(candidate)
            if total_loglik(trial) >= base - ASCENT_TOLERANCE:
                return candidate, StepDiagnostics(
                    damping=delta, fallback=delta > 0.0, attempts=attempts, summaries=trial,
                )
        delta = max(cfg.damping_init, cfg.damping_growth * delta)
        if delta > cfg.damping_cap:
            raise ConvergenceError(
                f"Round {round_index}: damping exceeded cap {cfg.damping_cap:g} without an ascent step",
                round_index=round_index,
            )
        logger.debug(f"Round {round_index}: escalating damping to {delta:g}")


def update_tau(
    summaries: Sequence[SiteSummary],
    theta: Theta,
    evaluate: Optional[Evaluator] = None,
    cfg: Optional[ConvergenceConfig] = None,
) -> Tuple[Theta, List[SiteSummary]]:
    """Backtracking gradient ascent on log(tau) using the summed tau-derivatives.

    Args:
        summaries: Site summaries computed at theta
        theta: Current parameters
        evaluate: Follow-up summary round at a trial point
        cfg: Halving budget and step bound

    Returns:
        Tuple of the updated parameters and the summaries computed there
        (theta itself when no trial step improved the objective)
    """
    cfg = cfg or ConvergenceConfig()
    ordered = _ordered(summaries)
    gradient = float(sum(s.dtau for s in ordered))
    if gradient == 0.0:
        return theta, list(ordered)

    direction = theta.tau * gradient
    if abs(direction) > cfg.max_log_tau_step:
        direction = math.copysign(cfg.max_log_tau_step, direction)
    if evaluate is None:
        return Theta(beta=theta.beta, tau=theta.tau * math.exp(direction)), list(ordered)

    base = total_loglik(ordered)
    eta = 1.0
    for _ in range(cfg.max_tau_halvings + 1):
        candidate = Theta(beta=theta.beta, tau=theta.tau * math.exp(eta * direction))
        # Steps this small cannot move the convergence test
        if abs(candidate.tau - theta.tau) < 1e-3 * cfg.theta_tol:
            break
        trial = evaluate(candidate)
        if total_loglik(trial) >= base - ASCENT_TOLERANCE:
            return candidate, trial
        eta *= 0.5
    return theta, list(ordered)


def normal_cdf(x):
    """Standard normal CDF through erfc."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def wald_inference(beta_hat: Sequence[float], aggregated_hessian: np.ndarray):
    """Standard errors, z statistics, two-sided p-values and 95% intervals.

    Args:
        beta_hat: Estimated coefficients
        aggregated_hessian: Summed Hessian of the objective at beta_hat

    Returns:
        Tuple (std_err, z, p_values, (ci_low, ci_high)) of numpy arrays

    Raises:
        InferenceUnavailableError: If -H is not invertible or not positive definite
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    info = -np.asarray(aggregated_hessian, dtype=float)
    try:
        if np.linalg.cond(info) > 1.0 / np.finfo(float).eps:
            raise np.linalg.LinAlgError("ill-conditioned")
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as e:
        raise InferenceUnavailableError(f"Negative Hessian is not invertible: {e}")
    variances = np.diag(cov)
    if not np.all(np.isfinite(variances)) or np.any(variances <= 0.0):
        raise InferenceUnavailableError("Negative Hessian is not positive definite at the estimate")
    std_err = np.sqrt(variances)
    z = beta_hat / std_err
    p_values = np.clip(erfc(np.abs(z) / math.sqrt(2.0)), 0.0, 1.0)
    return std_err, z, p_values, (beta_hat - Z_975 * std_err, beta_hat + Z_975 * std_err)


def information_criteria(loglik: float, k: int, N: int) -> Tuple[float, float]:
    """AIC and BIC for a log-likelihood with k parameters and N observations."""
    if N < 1 or k < 1:
        raise ValueError(f"Information criteria need N >= 1 and k >= 1, got N={N}, k={k}")
    return -2.0 * loglik + 2.0 * k, -2.0 * loglik + k * math.log(N)


def split_sizes(n: int, ratio: float) -> Tuple[int, int]:
    """Training and validation row counts for a site of n rows; (n, 0) when too small to split."""
    n_train = int(math.floor(ratio * n + 0.5))
    if n < 2 or n_train >= n or n_train < 1:
        return n, 0
    return n_train, n - n_train


def split_site(site: SiteData, ratio: float, seed: int) -> Tuple[SiteData, Optional[SiteData]]:
    """Stratified random split of one site's rows into training and validation.

    The stream is keyed by (seed, site_id), so a site can reproduce the split
    locally without seeing other sites.
    """
    n = site.n_i
    n_train, n_val = split_sizes(n, ratio)
    if n_val == 0:
        logger.warning(f"Site {site.site_id}: {n} rows is too small to split at ratio {ratio}, keeping all in train")
        return site, None

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(site.site_id)]))
    classes = [np.flatnonzero(site.y == label) for label in (0.0, 1.0)]
    quotas = [ratio * len(idx) for idx in classes]
    take = [int(math.floor(q)) for q in quotas]
    remainders = sorted(range(2), key=lambda c: (-(quotas[c] - take[c]), c))
    for c in remainders[: n_train - sum(take)]:
        take[c] += 1

    train_idx, val_idx = [], []
    for idx, t in zip(classes, take):
        shuffled = rng.permutation(idx)
        train_idx.extend(shuffled[:t].tolist())
        val_idx.extend(shuffled[t:].tolist())
    return site.take(sorted(train_idx)), site.take(sorted(val_idx))


def train_validation_split(
    data: Sequence[SiteData], ratio: float = 0.7, seed: int = 20211,
) -> Tuple[List[SiteData], List[SiteData]]:
    """Per-site stratified split; sites too small to split stay whole in train."""
    train, validation = [], []
    for site in data:
        tr, va = split_site(site, ratio, seed)
        train.append(tr)
        if va is not None:
            validation.append(va)
    return train, validation


def _method_from_config(model_cfg: ModelConfig) -> ApproximationMethod:
    if model_cfg.method == "la":
        return ApproximationMethod.laplace()
    return ApproximationMethod(kind=MethodKind.GH, gh_order=model_cfg.gh_order)


def _check_mode_accuracy(summaries: Sequence[SiteSummary], cfg: ConvergenceConfig) -> None:
    # A mode solved to |g_mu| < 1e-10 n_i is within 1e-10 n_i omega^2 of the exact mode
    for s in summaries:
        bound = 1e-10 * max(1, s.n_i) * s.omega_hat ** 2
        if bound >= cfg.mu_tol:
            logger.warning(f"Site {s.site_id}: mode accuracy bound {bound:.3g} exceeds mu_tol {cfg.mu_tol:g}")


def _center_flat_intercept(
    theta: Theta, summaries: List[SiteSummary], evaluate: Evaluator,
) -> Tuple[Theta, List[SiteSummary]]:
    # A flat intercept was held during the fit; move the common level of the
    # site modes into it so the random intercepts are centred at zero
    _, H = aggregate(summaries)
    if not flat_intercept(H):
        return theta, summaries
    weights = np.array([1.0 / s.omega_hat ** 2 for s in summaries])
    shift = float(np.average([s.mu_hat for s in summaries], weights=weights))
    beta = theta.beta_array.copy()
    beta[0] += shift
    centered = Theta.from_arrays(beta, theta.tau)
    logger.info(f"Flat random-intercept prior: moved level {shift:.6f} from the site modes into the intercept")
    return centered, evaluate(centered)


def _fit_candidate(
    transport: SummaryProvider,
    lam: float,
    model_cfg: ModelConfig,
    cfg: ConvergenceConfig,
    on_iteration: Optional[Callable[[float, Theta, TrajectoryPoint], None]] = None,
) -> _CandidateRun:
    rounds = 0

    def evaluate(candidate: Theta) -> List[SiteSummary]:
        nonlocal rounds
        rounds += 1
        return _ordered(transport.collect(candidate, "train"))

    run = _CandidateRun(lam, Theta.from_arrays(np.zeros(transport.p), model_cfg.tau_init), [], False, 0, math.inf)
    try:
        run.summaries = evaluate(run.theta)
        _iterate(run, evaluate, model_cfg, cfg, on_iteration, lambda: rounds)
        if not run.converged:
            logger.warning(
                f"lambda={lam:g}: no convergence after {cfg.max_outer_iters} iterations "
                f"(|dtheta|={run.final_delta:.3e})"
            )
        run.theta, run.summaries = _center_flat_intercept(run.theta, run.summaries, evaluate)
    except (ConvergenceError, ModelError, ValueError) as e:
        raise CandidateFailedError(getattr(e, "message", str(e)), run) from e
    return run


def _iterate(
    run: _CandidateRun,
    evaluate: Evaluator,
    model_cfg: ModelConfig,
    cfg: ConvergenceConfig,
    on_iteration: Optional[Callable[[float, Theta, TrajectoryPoint], None]],
    rounds: Callable[[], int],
) -> None:
    # run always holds the last accepted iterate, so a failure can still report it
    lam = run.lam
    for iteration in range(1, cfg.max_outer_iters + 1):
        theta, summaries = run.theta, run.summaries
        new_theta, diag = global_newton_step(summaries, theta, cfg, evaluate=evaluate, round_index=rounds())
        new_summaries = diag.summaries
        if not model_cfg.fix_tau:
            new_theta, new_summaries = update_tau(new_summaries, new_theta, evaluate=evaluate, cfg=cfg)

        delta = max(
            float(np.max(np.abs(new_theta.beta_array - theta.beta_array))),
            abs(new_theta.tau - theta.tau),
        )
        max_delta_mu = max(abs(a.mu_hat - b.mu_hat) for a, b in zip(new_summaries, summaries))
        point = TrajectoryPoint(
            iteration=iteration,
            delta_theta=delta,
            loglik=total_loglik(new_summaries),
            damping=diag.damping,
            max_delta_mu=max_delta_mu,
        )
        run.trajectory.append(point)
        if diag.fallback:
            logger.warning(f"lambda={lam:g} iteration {iteration}: damping engaged (delta={diag.damping:g})")
        logger.info(
            f"lambda={lam:g} iteration {iteration}: |dtheta|={delta:.3e} loglik={point.loglik:.6f} "
            f"tau={new_theta.tau:.4f}"
        )
        if on_iteration is not None:
            on_iteration(lam, new_theta, point)

        run.theta, run.summaries = new_theta, new_summaries
        run.iterations, run.final_delta = iteration, delta
        if delta < cfg.theta_tol:
            _check_mode_accuracy(new_summaries, cfg)
            run.converged = True
            return


def _unpenalized(summaries: Sequence[SiteSummary], theta: Theta, lam: float, penalize_intercept: bool) -> float:
    mask = penalty_mask(theta.p, penalize_intercept)
    penalty = lam * float(np.sum(mask * theta.beta_array ** 2))
    return total_loglik(summaries) + len(summaries) * penalty


def _build_result(
    run: _CandidateRun,
    model_cfg: ModelConfig,
    transport: SummaryProvider,
    candidates: List[CandidateResult],
    validation: Optional[CandidateResult],
    started: float,
) -> FitResult:
    k = transport.p + 1
    n_train = transport.observations("train")
    ordered = _ordered(run.summaries)
    loglik = aic = bic = None
    inference = {}
    if not ordered:
        logger.warning(f"lambda={run.lam:g} stopped before any site summary; reporting the starting point")
    else:
        loglik = _unpenalized(ordered, run.theta, run.lam, model_cfg.penalize_intercept)
        aic, bic = information_criteria(loglik, k, n_train)
        _, H = aggregate(ordered)
        try:
            std_err, z, p_values, (ci_low, ci_high) = wald_inference(run.theta.beta, H)
            inference = dict(
                std_err=std_err.tolist(), z=z.tolist(), p_values=p_values.tolist(),
                ci_low=ci_low.tolist(), ci_high=ci_high.tolist(),
            )
        except InferenceUnavailableError as e:
            logger.warning(f"Wald inference unavailable at lambda={run.lam:g}: {e.message}")

    return FitResult(
        method=model_cfg.method,
        gh_order=model_cfg.order,
        beta_hat=list(run.theta.beta),
        tau_hat=run.theta.tau,
        site_ids=[s.site_id for s in ordered] if ordered else list(transport.site_ids()),
        mu_hats=[s.mu_hat for s in ordered],
        lambda_hat=run.lam,
        loglik=loglik,
        aic=aic,
        bic=bic,
        n_observations=n_train,
        validation_loglik=validation.validation_loglik if validation else None,
        validation_aic=validation.validation_aic if validation else None,
        validation_bic=validation.validation_bic if validation else None,
        n_validation=transport.observations("validation"),
        inference_available=bool(inference),
        iterations=run.iterations,
        converged=run.converged,
        final_delta=run.final_delta if math.isfinite(run.final_delta) else None,
        runtime_seconds=time.perf_counter() - started,
        trajectory=run.trajectory,
        candidates=candidates,
        **inference,
    )


def fit(
    transport: SummaryProvider,
    model_cfg: Optional[ModelConfig] = None,
    cfg: Optional[ConvergenceConfig] = None,
    on_iteration: Optional[Callable[[float, Theta, TrajectoryPoint], None]] = None,
) -> FitResult:
    """Sweep lambda, fit each candidate, and keep the best on the validation partition.

    Args:
        transport: Provider of site summaries for every round
        model_cfg: Approximation, lambda grid and random-effect options
        cfg: Convergence and damping settings
        on_iteration: Optional hook called after every outer iteration

    Returns:
        FitResult at the selected lambda with Wald inference

    Raises:
        FitFailedError: If no candidate converged; its partial result keeps the diagnostics
    """
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or ConvergenceConfig()
    method = _method_from_config(model_cfg)
    started = time.perf_counter()
    k = transport.p + 1
    n_val = transport.observations("validation")

    candidates: List[CandidateResult] = []
    runs: List[Tuple[CandidateResult, _CandidateRun]] = []
    partial: Optional[_CandidateRun] = None
    failed: Optional[_CandidateRun] = None

    for lam in model_cfg.lambda_grid:
        transport.configure(method, lam, model_cfg.penalize_intercept)
        try:
            run = _fit_candidate(transport, lam, model_cfg, cfg, on_iteration)
        except CandidateFailedError as e:
            logger.error(f"lambda={lam:g} failed: {e.message}")
            failed_ll = None
            if e.run.summaries:
                failed_ll = _unpenalized(e.run.summaries, e.run.theta, lam, model_cfg.penalize_intercept)
            candidates.append(CandidateResult(
                lambda_value=lam, converged=False, iterations=e.run.iterations, train_loglik=failed_ll,
                error=e.message,
            ))
            if failed is None or (e.run.summaries and not failed.summaries):
                failed = e.run
            continue

        train_ll = _unpenalized(run.summaries, run.theta, lam, model_cfg.penalize_intercept)
        if not run.converged:
            candidates.append(CandidateResult(
                lambda_value=lam, converged=False, iterations=run.iterations, train_loglik=train_ll,
                error="no convergence",
            ))
            if partial is None or train_ll > _unpenalized(partial.summaries, partial.theta, partial.lam,
                                                          model_cfg.penalize_intercept):
                partial = run
            continue

        if n_val > 0:
            transport.configure(method, 0.0, model_cfg.penalize_intercept)
            val_ll = total_loglik(transport.collect(run.theta, "validation"))
            val_aic, val_bic = information_criteria(val_ll, k, n_val)
        else:
            val_ll = train_ll
            val_aic, val_bic = information_criteria(train_ll, k, transport.observations("train"))
        candidate = CandidateResult(
            lambda_value=lam, converged=True, iterations=run.iterations, train_loglik=train_ll,
            validation_loglik=val_ll, validation_aic=val_aic, validation_bic=val_bic,
        )
        logger.info(f"lambda={lam:g}: converged in {run.iterations} iterations, validation AIC={val_aic:.3f}")
        candidates.append(candidate)
        runs.append((candidate, run))

    if not runs:
        message = f"No lambda candidate converged ({len(candidates)} tried)"
        reported = partial if partial is not None else failed
        raise FitFailedError(message, partial=_build_result(reported, model_cfg, transport, candidates, None, started))

    best_candidate, best_run = min(
        runs, key=lambda r: (r[0].validation_aic, r[0].validation_bic, r[0].lambda_value),
    )
    logger.info(f"Selected lambda={best_candidate.lambda_value:g} (validation AIC={best_candidate.validation_aic:.3f})")
    return _build_result(best_run, model_cfg, transport, candidates, best_candidate, started)


def predict_proba(result: FitResult, site: SiteData) -> np.ndarray:
    """Predicted event probabilities for a site's rows at the fitted parameters.

    The random intercept is the mode of g on the given rows at the fitted theta,
    warm-started from the trained mode when the site took part in the fit.
    """
    theta = Theta(beta=result.beta_hat, tau=result.tau_hat)
    start = 0.0
    if site.site_id in result.site_ids:
        start = result.mu_hats[result.site_ids.index(site.site_id)]
    mu = fit_random_effect(site, theta, start=start).mu_hat
    return sigmoid(site.X @ theta.beta_array + mu)
