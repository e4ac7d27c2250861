"""Tests for aggregation, the global step, the lambda sweep and Wald inference."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from src.models.domain import ApproximationMethod, SiteData
from src.models.schemas import ConvergenceConfig, ModelConfig, SiteSummary, Theta
from src.pipelines.coordinator import (
    ConvergenceError, FitFailedError, InferenceUnavailableError, aggregate, fit, flat_intercept, global_newton_step,
    information_criteria, normal_cdf, predict_proba, split_site, split_sizes, total_loglik,
    train_validation_split, update_tau, wald_inference,
)
from src.services.model_core import sigmoid
from src.services.site_engine import fit_random_effect, site_summary
from src.services.transport import InProcessTransport
from tests.conftest import make_site, make_sites


def _summary(site_id, score, hessian, loglik=0.0, dtau=0.0, mu_hat=0.0, tau=1.0):
    p = len(score)
    return SiteSummary(
        site_id=site_id, p=p, score=list(score), hessian=[list(r) for r in hessian], loglik=loglik,
        mu_hat=mu_hat, omega_hat=1.0, dtau=dtau, n_i=10, beta_echo=[0.0] * p, tau_echo=tau,
        lambda_echo=0.0, k_echo=1,
    )


def test_aggregate_is_order_independent(rng):
    summaries = []
    for i in range(6):
        a = rng.normal(size=(3, 3))
        summaries.append(_summary(i + 1, rng.normal(size=3), -(a @ a.T) - np.eye(3), loglik=rng.normal()))
    S, H = aggregate(summaries)
    for _ in range(5):
        perm = [summaries[i] for i in rng.permutation(6)]
        S2, H2 = aggregate(perm)
        np.testing.assert_array_equal(S, S2)
        np.testing.assert_array_equal(H, H2)
        assert total_loglik(perm) == total_loglik(summaries)


def test_aggregate_rejects_empty_and_mixed_p():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([_summary(1, [0.0], [[-1.0]]), _summary(2, [0.0, 0.0], [[-1.0, 0.0], [0.0, -1.0]])])


def test_undamped_newton_step_solves_the_quadratic():
    H = np.array([[-4.0, 1.0], [1.0, -2.0]])
    S = np.array([1.0, -0.5])
    theta = Theta(beta=[0.2, 0.3], tau=1.0)
    new_theta, diag = global_newton_step([_summary(1, S, H)], theta, ConvergenceConfig())
    np.testing.assert_allclose(new_theta.beta_array, theta.beta_array + np.linalg.solve(-H, S))
    assert diag.damping == 0.0
    assert not diag.fallback
    assert new_theta.tau == theta.tau


def test_singular_hessian_engages_damping():
    theta = Theta(beta=[0.0, 0.0], tau=1.0)
    summaries = [_summary(1, [1.0, 1.0], [[0.0, 0.0], [0.0, 0.0]])]
    new_theta, diag = global_newton_step(summaries, theta, ConvergenceConfig())
    assert diag.fallback
    assert diag.damping == pytest.approx(1e-8)
    assert np.all(np.isfinite(new_theta.beta_array))


def test_damping_escalates_until_the_step_ascends():
    # Objective -||beta - 1||^2 evaluated exactly; the reported Hessian is wrong in sign
    def objective(beta):
        return -float(np.sum((beta - 1.0) ** 2))

    def evaluate(theta):
        return [_summary(1, [0.0, 0.0], [[-1.0, 0.0], [0.0, -1.0]], loglik=objective(theta.beta_array))]

    theta = Theta(beta=[0.0, 0.0], tau=1.0)
    summaries = [_summary(1, [2.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], loglik=objective(theta.beta_array))]
    new_theta, diag = global_newton_step(summaries, theta, ConvergenceConfig(), evaluate=evaluate)
    assert diag.fallback
    assert diag.damping > 1.0
    assert objective(new_theta.beta_array) >= objective(theta.beta_array)
    assert diag.summaries is not None


def test_damping_cap_raises_convergence_error():
    def evaluate(theta):
        return [_summary(1, [0.0], [[-1.0]], loglik=-1e9)]

    summaries = [_summary(1, [1.0], [[-1.0]], loglik=0.0)]
    with pytest.raises(ConvergenceError) as excinfo:
        global_newton_step(summaries, Theta(beta=[0.0], tau=1.0), ConvergenceConfig(), evaluate=evaluate, round_index=7)
    assert excinfo.value.round_index == 7


@pytest.mark.parametrize("gradient, direction", [(2.0, 1), (-2.0, -1)])
def test_update_tau_follows_the_gradient(gradient, direction):
    theta = Theta(beta=[0.0], tau=1.0)
    new_theta, _ = update_tau([_summary(1, [0.0], [[-1.0]], dtau=gradient)], theta)
    assert math.copysign(1.0, new_theta.tau - theta.tau) == direction
    assert new_theta.beta == theta.beta


def test_update_tau_clips_the_log_step():
    theta = Theta(beta=[0.0], tau=1.0)
    new_theta, _ = update_tau([_summary(1, [0.0], [[-1.0]], dtau=1e6)], theta)
    assert new_theta.tau == pytest.approx(math.exp(3.0))


def test_update_tau_backtracks_and_keeps_theta_without_ascent():
    theta = Theta(beta=[0.0], tau=1.0)
    summaries = [_summary(1, [0.0], [[-1.0]], dtau=0.5, loglik=0.0)]
    calls = []

    def evaluate(candidate):
        calls.append(candidate.tau)
        return [_summary(1, [0.0], [[-1.0]], loglik=-1.0, tau=candidate.tau)]

    new_theta, new_summaries = update_tau(summaries, theta, evaluate=evaluate)
    assert new_theta == theta
    assert new_summaries == summaries
    assert len(calls) > 1
    assert all(b < a for a, b in zip(calls, calls[1:]))


def test_update_tau_on_real_sites_increases_the_objective(rng):
    sites = make_sites(rng, 5, 40, 2, beta=[-0.5, 0.8], tau=2.0)
    transport = InProcessTransport(sites, split_ratio=None)
    transport.configure(ApproximationMethod.gauss_hermite(3), 0.0, False)
    theta = Theta(beta=[-0.5, 0.8], tau=0.3)
    summaries = transport.collect(theta)
    new_theta, new_summaries = update_tau(summaries, theta, evaluate=transport.collect)
    assert new_theta.tau > theta.tau
    assert total_loglik(new_summaries) > total_loglik(summaries)


def test_normal_cdf():
    assert normal_cdf(0.0) == pytest.approx(0.5)
    np.testing.assert_allclose(normal_cdf([-1.96, 1.0]), norm.cdf([-1.96, 1.0]), rtol=1e-12)


def test_wald_inference_diagonal():
    std_err, z, p_values, (lo, hi) = wald_inference([2.0, 1.0], -np.diag([4.0, 1.0]))
    np.testing.assert_allclose(std_err, [0.5, 1.0])
    np.testing.assert_allclose(z, [4.0, 1.0])
    np.testing.assert_allclose(p_values, 2.0 * norm.sf([4.0, 1.0]), rtol=1e-10)
    np.testing.assert_allclose(lo, [2.0 - 1.959964 * 0.5, 1.0 - 1.959964])
    np.testing.assert_allclose(hi, [2.0 + 1.959964 * 0.5, 1.0 + 1.959964])


def test_wald_inference_rejects_singular_and_indefinite():
    with pytest.raises(InferenceUnavailableError):
        wald_inference([1.0, 1.0], np.zeros((2, 2)))
    with pytest.raises(InferenceUnavailableError):
        wald_inference([1.0], np.array([[1.0]]))


def test_information_criteria_reference():
    aic, bic = information_criteria(-13562.9, 20, 46312)
    assert aic == pytest.approx(27165.9, abs=0.2)
    assert bic == pytest.approx(27340.8, abs=0.2)
    with pytest.raises(ValueError):
        information_criteria(-1.0, 1, 0)


@pytest.mark.parametrize("n, expected", [(10, (7, 3)), (500, (350, 150)), (3, (2, 1)), (2, (1, 1)), (1, (1, 0))])
def test_split_sizes(n, expected):
    assert split_sizes(n, 0.7) == expected


def test_split_site_is_stratified_and_deterministic(site_factory):
    site = site_factory(n=200, p=3, site_id=4)
    train, val = split_site(site, 0.7, seed=11)
    assert train.n_i == 140 and val.n_i == 60
    positives = int(site.y.sum())
    assert abs(int(train.y.sum()) - 0.7 * positives) <= 1.0
    again_train, again_val = split_site(site, 0.7, seed=11)
    assert again_train == train and again_val == val
    other_train, _ = split_site(site, 0.7, seed=12)
    assert other_train != train

    def keyed(s):
        return sorted(tuple(x) + (y,) for x, y in zip(s.X, s.y))
    assert sorted(keyed(train) + keyed(val)) == keyed(site)


def test_split_keeps_tiny_sites_whole():
    tiny = SiteData(site_id=1, X=np.ones((1, 2)), y=np.array([1.0]))
    train, validation = train_validation_split([tiny], 0.7, 5)
    assert train == [tiny]
    assert validation == []


def test_split_depends_on_site_id(site_factory):
    a = site_factory(n=50, p=2, site_id=1)
    b = SiteData(site_id=2, X=a.X, y=a.y)
    train_a, _ = split_site(a, 0.7, 3)
    train_b, _ = split_site(b, 0.7, 3)
    assert not np.array_equal(train_a.X, train_b.X)


def test_collect_matches_a_hand_loop(rng):
    sites = make_sites(rng, 4, 30, 3)
    transport = InProcessTransport(sites, split_ratio=None, warm_start=False)
    method = ApproximationMethod.gauss_hermite(2)
    transport.configure(method, 0.5, False)
    theta = Theta(beta=[0.1, -0.2, 0.3], tau=1.3)
    summaries = transport.collect(theta)
    by_hand = [site_summary(s, theta, method, 0.5) for s in sites]
    S, H = aggregate(summaries)
    S2, H2 = aggregate(by_hand)
    np.testing.assert_allclose(S, S2, rtol=1e-12)
    np.testing.assert_allclose(H, H2, rtol=1e-12)
    assert total_loglik(summaries) == pytest.approx(total_loglik(by_hand), rel=1e-12)


def _random_partition(rng, X, y, m):
    order = rng.permutation(len(y))
    cuts = np.sort(rng.choice(np.arange(5, len(y) - 5), size=m - 1, replace=False))
    return [SiteData(site_id=i + 1, X=X[idx], y=y[idx]) for i, idx in enumerate(np.split(order, cuts))]


def _single_loop_iterates(sites, method, lam, cfg, iterations):
    def evaluate(theta):
        return [site_summary(site, theta, method, lam) for site in sites]

    theta = Theta.from_arrays(np.zeros(sites[0].p), 1.0)
    summaries = evaluate(theta)
    iterates = []
    for _ in range(iterations):
        theta, diag = global_newton_step(summaries, theta, cfg, evaluate=evaluate)
        theta, summaries = update_tau(diag.summaries, theta, evaluate=evaluate, cfg=cfg)
        iterates.append(theta)
    return iterates


@pytest.mark.parametrize("seed", range(20))
def test_federated_iterates_match_a_single_loop_over_the_same_partition(seed):
    rng = np.random.default_rng(seed)
    pooled = make_site(rng, 240, 3, beta=[-0.5, 0.8, 0.3])
    m = (2, 5, 10)[seed % 3]
    sites = _random_partition(rng, pooled.X, pooled.y, m)
    cfg = ConvergenceConfig()
    seen = []
    fit(
        InProcessTransport(sites, split_ratio=None, warm_start=False),
        ModelConfig(method="gh", gh_order=2, lambda_grid=[0.5]),
        cfg,
        on_iteration=lambda lam, theta, point: seen.append(theta),
    )
    expected = _single_loop_iterates(sites, ApproximationMethod.gauss_hermite(2), 0.5, cfg, len(seen))
    assert len(seen) > 1
    for got, want in zip(seen, expected):
        np.testing.assert_allclose(got.beta_array, want.beta_array, rtol=0, atol=1e-12)
        assert abs(got.tau - want.tau) < 1e-12


def test_transport_rejects_bad_site_sets(rng):
    a = make_site(rng, 10, 2, site_id=1)
    with pytest.raises(ValueError):
        InProcessTransport([a, make_site(rng, 10, 2, site_id=1)])
    with pytest.raises(ValueError):
        InProcessTransport([a, make_site(rng, 10, 3, site_id=2)])
    with pytest.raises(ValueError):
        InProcessTransport([])
    with pytest.raises(ValueError):
        InProcessTransport([a]).collect(Theta(beta=[0.0, 0.0], tau=1.0), "test")


def _irls(X, y, iterations=50):
    beta = np.zeros(X.shape[1])
    for _ in range(iterations):
        pi = sigmoid(X @ beta)
        w = pi * (1.0 - pi)
        step = np.linalg.solve((X.T * w) @ X, X.T @ (y - pi))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12:
            break
    return beta


def test_tiny_fixed_tau_reduces_to_logistic_regression(rng):
    site = make_site(rng, 800, 3, beta=[-0.4, 0.7, -0.3])
    transport = InProcessTransport([site], split_ratio=None)
    model_cfg = ModelConfig(method="la", lambda_grid=[0.0], fix_tau=True, tau_init=1e-4)
    result = fit(transport, model_cfg, ConvergenceConfig(theta_tol=1e-9))
    assert result.converged
    assert result.tau_hat == 1e-4
    np.testing.assert_allclose(result.beta_hat, _irls(site.X, site.y), atol=1e-5)
    assert abs(result.mu_hats[0]) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_flat_random_intercept_reduces_to_logistic_regression(seed):
    rng = np.random.default_rng(seed)
    site = make_site(rng, 3000, 3, beta=[-0.4, 0.6, -0.35])
    transport = InProcessTransport([site], split_ratio=None)
    model_cfg = ModelConfig(method="la", lambda_grid=[0.0], fix_tau=True, tau_init=1e6)
    result = fit(transport, model_cfg, ConvergenceConfig(theta_tol=1e-8))
    assert result.converged
    assert result.tau_hat == 1e6
    np.testing.assert_allclose(result.beta_hat, _irls(site.X, site.y), atol=1e-3)
    assert abs(result.mu_hats[0]) < 1e-6


def test_flat_intercept_is_held_by_the_newton_step():
    H = np.array([[1e-14, 0.0], [0.0, -4.0]])
    assert flat_intercept(H)
    assert not flat_intercept(np.array([[-1.0, 0.0], [0.0, -4.0]]))
    assert not flat_intercept(np.array([[-1e-14]]))
    theta = Theta(beta=[0.3, 0.0], tau=1e6)
    new_theta, diag = global_newton_step([_summary(1, [1e-9, 2.0], H)], theta, ConvergenceConfig())
    assert new_theta.beta == pytest.approx([0.3, 0.5])
    assert diag.damping == 0.0


def test_fit_sweeps_lambda_and_selects_on_validation(rng):
    sites = make_sites(rng, 3, 120, 3, beta=[-0.3, 0.8, -0.6], tau=0.7)
    transport = InProcessTransport(sites, split_ratio=0.7, split_seed=1)
    model_cfg = ModelConfig(method="gh", gh_order=2, lambda_grid=[0.0, 1.0, 5.0])
    seen = []
    result = fit(transport, model_cfg, on_iteration=lambda lam, theta, point: seen.append(lam))
    assert result.converged
    assert [c.lambda_value for c in result.candidates] == [0.0, 1.0, 5.0]
    converged = [c for c in result.candidates if c.converged]
    best = min(converged, key=lambda c: (c.validation_aic, c.validation_bic, c.lambda_value))
    assert result.lambda_hat == best.lambda_value
    assert result.validation_aic == best.validation_aic
    assert result.n_observations == transport.observations("train")
    assert result.n_validation == transport.observations("validation")
    assert result.site_ids == [1, 2, 3]
    assert result.inference_available and len(result.p_values) == 3
    assert set(seen) == {0.0, 1.0, 5.0}
    aic, bic = information_criteria(result.loglik, 4, result.n_observations)
    assert result.aic == pytest.approx(aic) and result.bic == pytest.approx(bic)


def test_fit_is_deterministic(rng):
    sites = make_sites(rng, 3, 60, 2, beta=[0.2, -0.5])
    cfg = ModelConfig(method="gh", gh_order=3, lambda_grid=[0.0, 2.0])
    a = fit(InProcessTransport(sites, split_seed=4), cfg).without_timing()
    b = fit(InProcessTransport(list(reversed(sites)), split_seed=4), cfg).without_timing()
    assert a == b


def test_predict_proba_resolves_the_intercept_on_the_given_rows(rng):
    sites = make_sites(rng, 2, 80, 2, beta=[0.0, 1.0])
    result = fit(InProcessTransport(sites, split_ratio=None), ModelConfig(method="la", lambda_grid=[0.0]))
    theta = Theta(beta=result.beta_hat, tau=result.tau_hat)
    beta = np.asarray(result.beta_hat)

    # On the training rows the mode is the trained one
    probs = predict_proba(result, sites[0])
    np.testing.assert_allclose(probs, sigmoid(sites[0].X @ beta + result.mu_hats[0]), rtol=1e-6)

    subset = sites[0].take(range(0, 80, 3))
    mu = fit_random_effect(subset, theta).mu_hat
    assert mu != pytest.approx(result.mu_hats[0], abs=1e-6)
    np.testing.assert_allclose(predict_proba(result, subset), sigmoid(subset.X @ beta + mu), rtol=1e-6)

    unseen = make_site(rng, 20, 2, site_id=99)
    out = predict_proba(result, unseen)
    assert out.shape == (20,) and np.all((out > 0) & (out < 1))
    mu_unseen = fit_random_effect(unseen, theta).mu_hat
    np.testing.assert_allclose(out, sigmoid(unseen.X @ beta + mu_unseen), rtol=1e-6)


def test_every_candidate_failing_still_reports_a_result(rng):
    sites = make_sites(rng, 3, 80, 2, beta=[0.1, 0.7])
    transport = InProcessTransport(sites, split_ratio=None)
    with pytest.raises(FitFailedError) as excinfo:
        fit(transport, ModelConfig(method="la", lambda_grid=[0.0, 1.0]), ConvergenceConfig(max_outer_iters=1))
    partial = excinfo.value.partial
    assert not partial.converged
    assert [c.error for c in partial.candidates] == ["no convergence", "no convergence"]
    assert len(partial.trajectory) == 1
    assert partial.loglik is not None and partial.final_delta is not None


def test_candidate_errors_are_reported_with_the_last_iterate(rng, monkeypatch):
    def refuse(summaries, theta, cfg, evaluate=None, round_index=0):
        raise ConvergenceError(f"Round {round_index}: damping exceeded cap", round_index=round_index)

    monkeypatch.setattr("src.pipelines.coordinator.global_newton_step", refuse)
    sites = make_sites(rng, 2, 60, 2)
    with pytest.raises(FitFailedError) as excinfo:
        fit(InProcessTransport(sites, split_ratio=None), ModelConfig(method="gh", gh_order=3, lambda_grid=[0.0, 2.0]))
    partial = excinfo.value.partial
    assert not partial.converged and partial.iterations == 0
    assert all(c.error.startswith("Round 1: damping exceeded cap") for c in partial.candidates)
    assert partial.beta_hat == [0.0, 0.0]
    assert partial.site_ids == [1, 2] and partial.final_delta is None
