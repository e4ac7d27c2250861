"""Tests for significance, power, coefficient error and ROC metrics."""

import csv

import numpy as np
import pytest
from scipy.stats import mannwhitneyu
from sklearn.metrics import roc_auc_score

from src.services.evaluation import (
    ConvergenceRecord, SIGNIFICANCE_HEADER, UndefinedMetricError, coefficient_error, convergence_summary,
    empirical_power, format_cell, method_comparison_table, roc_auc, significance_confusion,
    significance_rows, wilson_interval, write_table,
)


def test_wilson_reference_interval():
    low, high = wilson_interval(5, 10)
    assert low == pytest.approx(0.2366, abs=1e-4)
    assert high == pytest.approx(0.7634, abs=1e-4)


def test_wilson_boundaries():
    assert wilson_interval(0, 20)[0] == 0.0
    assert wilson_interval(20, 20)[1] == 1.0
    low, high = wilson_interval(0, 20)
    assert 0.0 < high < 0.25
    with pytest.raises(ValueError):
        wilson_interval(3, 2)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_wilson_contains_the_point_estimate(rng):
    for _ in range(200):
        n = int(rng.integers(1, 500))
        k = int(rng.integers(0, n + 1))
        low, high = wilson_interval(k, n)
        assert 0.0 <= low <= k / n <= high <= 1.0


def test_wilson_wider_at_higher_confidence():
    narrow = wilson_interval(30, 100, conf=0.9)
    wide = wilson_interval(30, 100, conf=0.99)
    assert wide[0] < narrow[0] and wide[1] > narrow[1]


def test_wilson_coverage(rng):
    p, n, trials = 0.3, 80, 2000
    covered = 0
    for k in rng.binomial(n, p, size=trials):
        low, high = wilson_interval(int(k), n)
        covered += low <= p <= high
    assert 0.92 < covered / trials < 0.98


def test_auc_matches_mann_whitney(rng):
    for _ in range(20):
        scores = np.round(rng.random(60), 1)
        labels = rng.random(60) < 0.4
        if labels.all() or not labels.any():
            continue
        u = mannwhitneyu(scores[labels], scores[~labels]).statistic
        expected = u / (labels.sum() * (~labels).sum())
        assert roc_auc(scores, labels).auc == pytest.approx(expected, abs=1e-12)


def test_roc_agrees_with_roc_auc_score(rng):
    scores = rng.random(400)
    labels = rng.random(400) < scores
    report = roc_auc(scores, labels)
    assert report.auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    j = report.tpr - report.fpr
    assert report.best_threshold == report.thresholds[int(np.argmax(j[1:])) + 1]
    assert report.recall == pytest.approx(report.tpr[int(np.argmax(j[1:])) + 1])


def test_roc_reference_examples():
    perfect = roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert perfect.auc == 1.0
    assert perfect.best_threshold == 0.8
    assert perfect.precision == 1.0 and perfect.recall == 1.0 and perfect.f1 == 1.0
    np.testing.assert_array_equal(perfect.thresholds, [np.inf, 0.9, 0.8, 0.3, 0.1])
    np.testing.assert_allclose(perfect.tpr, [0.0, 0.5, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(perfect.fpr, [0.0, 0.0, 0.0, 0.5, 1.0])

    mixed = roc_auc([0.9, 0.8, 0.3], [1, 0, 1])
    assert mixed.auc == pytest.approx(0.5)
    assert mixed.n_positive == 2 and mixed.n_negative == 1


def test_roc_ties_move_together():
    report = roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert report.auc == pytest.approx(0.5)
    assert report.thresholds.size == 2


def test_roc_bounds_are_ordered(rng):
    scores = rng.random(300)
    labels = rng.random(300) < scores
    report = roc_auc(scores, labels)
    assert 0.0 <= report.auc_low <= report.auc <= report.auc_high <= 1.0
    assert report.recall_bounds[0] <= report.recall <= report.recall_bounds[1]
    assert report.precision_bounds[0] <= report.precision <= report.precision_bounds[1]
    assert report.f1_bounds[0] <= report.f1 <= report.f1_bounds[1]


def test_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1])


def test_significance_confusion():
    p_values = [[0.01, 0.20, 0.03], [0.02, 0.01, 0.50], [0.30, 0.04, 0.01]]
    report = significance_confusion(p_values, [1.0, 0.0, -1.0], alpha=0.05)
    x1, x2, x3 = report.coefficients
    assert (x1.tp, x1.fn, x1.fp, x1.tn) == (2, 1, 0, 0)
    assert (x2.tp, x2.fn, x2.fp, x2.tn) == (0, 0, 2, 1)
    assert (x3.tp, x3.fn) == (2, 1)
    assert x2.precision == 0.0 and x2.recall is None and x2.tnr == pytest.approx(1 / 3)
    assert (report.overall.tp, report.overall.fp, report.overall.tn, report.overall.fn) == (4, 2, 1, 2)
    assert report.overall.accuracy == pytest.approx(5 / 9)
    assert report.mean_precision() == pytest.approx((1.0 + 0.0 + 1.0) / 3)


def test_null_coefficient_false_positive_rate(rng):
    datasets = 4000
    p_values = np.column_stack([rng.random(datasets) ** 4, rng.random(datasets)])
    report = significance_confusion(p_values, [0.8, 0.0], alpha=0.05)
    null = report.coefficients[1]
    assert null.tp == 0 and null.fn == 0
    low, high = wilson_interval(null.fp, null.fp + null.tn, conf=0.999)
    assert low < 0.05 < high
    assert null.fp / datasets == pytest.approx(0.05, abs=0.015)


def test_tnr_undefined_when_every_coefficient_is_nonzero():
    report = significance_confusion([[0.01, 0.5]], [1.0, 2.0])
    assert report.overall.tnr is None
    rows = list(significance_rows("la", report))
    assert [r[1] for r in rows] == ["X1", "X2", "overall"]


def test_significance_shape_check():
    with pytest.raises(ValueError):
        significance_confusion([[0.1, 0.2]], [1.0, 2.0, 3.0])


def test_empirical_power():
    p_values = [[0.001, 0.2], [0.04, 0.3], [0.2, 0.01], [0.5, 0.9]]
    curves = empirical_power(p_values, [1.0, 0.0], [0.0, 0.05, 0.3, 1.0])
    assert curves.labels == ["X1"]
    np.testing.assert_allclose(curves.power, [[0.0, 0.5, 0.75, 1.0]])
    with pytest.raises(ValueError):
        empirical_power([[0.1, 0.1]], [1.0, 0.0], [0.05])
    with pytest.raises(ValueError):
        empirical_power(p_values, [1.0, 0.0], [1.5])


def test_power_is_monotone_in_alpha(rng):
    p_values = rng.random((50, 3)) ** 3
    curves = empirical_power(p_values, [1.0, -1.0, 0.5], np.linspace(0, 1, 21))
    assert np.all(np.diff(curves.power, axis=1) >= 0.0)


def test_coefficient_error():
    estimates = [[1.0, 0.0], [2.0, 0.5], [3.0, -0.5], [4.0, 1.0], [5.0, -1.0]]
    first, second = coefficient_error(estimates, [3.0, 0.0], labels=["a", "b"])
    assert (first.minimum, first.q1, first.median, first.q3, first.maximum) == (-2.0, -1.0, 0.0, 1.0, 2.0)
    assert first.mean_abs == pytest.approx(1.2)
    assert second.label == "b" and second.median == 0.0


def test_convergence_summary():
    records = [
        ConvergenceRecord("la", "setting1", 4, 1.0),
        ConvergenceRecord("la", "setting1", 6, 3.0),
        ConvergenceRecord("gh2", "setting1", 5, 2.0, converged=False),
    ]
    gh, la = convergence_summary(records)
    assert (la.method, la.fits, la.converged) == ("la", 2, 2)
    assert la.mean_iterations == 5.0
    assert la.sd_iterations == pytest.approx(np.sqrt(2.0))
    assert (gh.method, gh.converged, gh.sd_runtime) == ("gh2", 0, 0.0)


def test_method_comparison_table():
    reports = {
        "la": significance_confusion([[0.01, 0.5]], [1.0, 0.0]),
        "gh2": significance_confusion([[0.5, 0.01]], [1.0, 0.0]),
    }
    table = method_comparison_table(reports)
    assert table.methods == ["gh2", "la"]
    assert table.header()[:3] == ["coefficient", "gh2_precision", "gh2_recall"]
    rows = {row[0]: row for row in table.rows()}
    assert set(rows) == {"X1", "X2", "overall"}
    assert table.cells[("la", "X1", "recall")] == 1.0
    assert table.cells[("gh2", "X1", "recall")] == 0.0
    with pytest.raises(ValueError):
        method_comparison_table({})


def test_format_cell():
    assert format_cell(None) == "NA"
    assert format_cell(float("nan")) == "NA"
    assert format_cell(3) == "3"
    assert format_cell(True) == "1"
    assert format_cell(0.1 + 0.2) == "0.3"
    assert format_cell("la") == "la"


def test_write_table(tmp_path):
    report = significance_confusion([[0.01, 0.5]], [1.0, 0.0])
    path = write_table(tmp_path / "sub" / "significance.csv", SIGNIFICANCE_HEADER, significance_rows("la", report))
    with path.open(encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == SIGNIFICANCE_HEADER
    assert rows[1][:6] == ["la", "X1", "1", "0", "0", "0"]
    assert rows[1][8] == "NA"
