"""Metrics over repeated fits: significance detection, power, coefficient error, ROC/AUC.

Everything here is a pure function of its inputs. Ratios whose denominator is
zero are reported as None and written as NA.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm
from sklearn.metrics import auc as sklearn_auc
from sklearn.metrics import roc_curve

logger = logging.getLogger(__name__)

Z_975 = 1.959964


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given input (for example one-class labels)."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def _z_for(conf: float) -> float:
    if not 0.0 < conf < 1.0:
        raise ValueError(f"Confidence level must be in (0, 1), got {conf}")
    return Z_975 if conf == 0.95 else float(norm.ppf(0.5 + conf / 2.0))


def _wilson_from_rate(p_hat: float, n: float, z: float) -> Tuple[float, float]:
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p_hat + z2 / (2.0 * n)) / denom
    half = z / denom * math.sqrt(p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n))
    return max(0.0, center - half), min(1.0, center + half)


def wilson_interval(successes: int, n: int, conf: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion.

    Args:
        successes: Number of successes, 0 <= successes <= n
        n: Number of trials, at least 1
        conf: Confidence level

    Returns:
        (low, high) with 0 <= low <= successes/n <= high <= 1
    """
    if n < 1 or not 0 <= successes <= n:
        raise ValueError(f"Need 0 <= successes <= n and n >= 1, got successes={successes}, n={n}")
    low, high = _wilson_from_rate(successes / n, float(n), _z_for(conf))
    if successes == 0:
        low = 0.0
    if successes == n:
        high = 1.0
    return low, high


# Significance detection

@dataclass(frozen=True)
class ConfusionRow:
    label: str
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def tnr(self) -> Optional[float]:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def accuracy(self) -> Optional[float]:
        return _ratio(self.tp + self.tn, self.total)


@dataclass(frozen=True)
class SignificanceReport:
    alpha: float
    coefficients: List[ConfusionRow]
    overall: ConfusionRow

    def mean_precision(self) -> Optional[float]:
        """Average precision over coefficients where it is defined."""
        values = [r.precision for r in self.coefficients if r.precision is not None]
        return float(np.mean(values)) if values else None


def _p_matrix(p_value_sets, true_beta) -> Tuple[np.ndarray, np.ndarray]:
    P = np.asarray(p_value_sets, dtype=float)
    beta = np.asarray(true_beta, dtype=float)
    if P.ndim != 2 or P.shape[1] != beta.size:
        raise ValueError(f"Expected a (datasets, {beta.size}) matrix of p-values, got shape {P.shape}")
    return P, beta


def coefficient_labels(p: int) -> List[str]:
    return [f"X{j}" for j in range(1, p + 1)]


def significance_confusion(p_value_sets, true_beta, alpha: float = 0.05,
                           labels: Optional[Sequence[str]] = None) -> SignificanceReport:
    """Pool significance calls p_j < alpha against the truth beta_j != 0 across datasets."""
    P, beta = _p_matrix(p_value_sets, true_beta)
    labels = list(labels) if labels is not None else coefficient_labels(beta.size)
    predicted = P < alpha
    actual = beta != 0.0

    rows = []
    for j, label in enumerate(labels):
        pred = predicted[:, j]
        if actual[j]:
            tp, fn, fp, tn = int(pred.sum()), int((~pred).sum()), 0, 0
        else:
            tp, fn, fp, tn = 0, 0, int(pred.sum()), int((~pred).sum())
        rows.append(ConfusionRow(label, tp=tp, fp=fp, tn=tn, fn=fn))
    overall = ConfusionRow(
        "overall",
        tp=sum(r.tp for r in rows), fp=sum(r.fp for r in rows),
        tn=sum(r.tn for r in rows), fn=sum(r.fn for r in rows),
    )
    return SignificanceReport(alpha=alpha, coefficients=rows, overall=overall)


@dataclass(frozen=True)
class PowerCurves:
    alpha_grid: np.ndarray
    labels: List[str]
    power: np.ndarray  # (coefficients, alphas)


def empirical_power(p_value_sets, true_beta, alpha_grid,
                    labels: Optional[Sequence[str]] = None) -> PowerCurves:
    """Rejection fraction at each alpha, for the truly non-zero coefficients only."""
    P, beta = _p_matrix(p_value_sets, true_beta)
    if P.shape[0] < 2:
        raise ValueError(f"Empirical power needs at least 2 datasets, got {P.shape[0]}")
    grid = np.asarray(alpha_grid, dtype=float)
    if np.any((grid < 0.0) | (grid > 1.0)):
        raise ValueError("alpha values must lie in [0, 1]")
    labels = list(labels) if labels is not None else coefficient_labels(beta.size)
    nonzero = np.flatnonzero(beta != 0.0)
    power = np.array([[np.mean(P[:, j] < a) if a < 1.0 else 1.0 for a in grid] for j in nonzero])
    return PowerCurves(alpha_grid=grid, labels=[labels[j] for j in nonzero], power=power.reshape(len(nonzero), grid.size))


# Coefficient error

@dataclass(frozen=True)
class ErrorSummary:
    label: str
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean_abs: float


def coefficient_error(beta_hats, true_beta, labels: Optional[Sequence[str]] = None) -> List[ErrorSummary]:
    """Box-plot statistics of beta_hat_j - beta_j per coefficient."""
    B = np.asarray(beta_hats, dtype=float)
    beta = np.asarray(true_beta, dtype=float)
    if B.ndim != 2 or B.shape[0] < 1 or B.shape[1] != beta.size:
        raise ValueError(f"Expected a (datasets >= 1, {beta.size}) matrix of estimates, got shape {B.shape}")
    labels = list(labels) if labels is not None else coefficient_labels(beta.size)
    diff = B - beta
    summaries = []
    for j, label in enumerate(labels):
        d = diff[:, j]
        q1, med, q3 = np.percentile(d, [25, 50, 75])
        summaries.append(ErrorSummary(label, float(d.min()), float(q1), float(med), float(q3), float(d.max()),
                                      float(np.mean(np.abs(d)))))
    return summaries


# ROC / AUC

@dataclass(frozen=True)
class RocReport:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    auc_low: float
    auc_high: float
    best_threshold: float
    precision: Optional[float]
    recall: float
    f1: Optional[float]
    precision_bounds: Optional[Tuple[float, float]]
    recall_bounds: Tuple[float, float]
    f1_bounds: Optional[Tuple[float, float]]
    n_positive: int
    n_negative: int


def _auc_bounds(auc: float, n_pos: int, n_neg: int, z: float) -> Tuple[float, float]:
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    var = (auc * (1.0 - auc) + (n_pos - 1) * (q1 - auc ** 2) + (n_neg - 1) * (q2 - auc ** 2)) / (n_pos * n_neg)
    se = math.sqrt(max(var, 0.0))
    return max(0.0, auc - z * se), min(1.0, auc + z * se)


def roc_auc(scores, labels, conf: float = 0.95) -> RocReport:
    """ROC sweep over every distinct score with the Youden-optimal operating point.

    A row is called positive when its score is at or above the threshold, so
    tied scores change class together. The first threshold is +inf (nothing
    called positive).

    Raises:
        UndefinedMetricError: If labels hold only one class
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when labels contain a single class")

    fpr, tpr, thresholds = roc_curve(y, s, drop_intermediate=False)
    auc = float(sklearn_auc(fpr, tpr))

    z = _z_for(conf)
    auc_low, auc_high = _auc_bounds(auc, n_pos, n_neg, z)
    best = int(np.argmax(tpr[1:] - fpr[1:])) + 1
    tp_b, fp_b = int(round(tpr[best] * n_pos)), int(round(fpr[best] * n_neg))
    fn_b = n_pos - tp_b

    precision = _ratio(tp_b, tp_b + fp_b)
    recall = tp_b / n_pos
    f1_den = tp_b + 0.5 * (fp_b + fn_b)
    f1 = tp_b / f1_den if f1_den > 0 else None
    return RocReport(
        thresholds=thresholds,
        tpr=tpr,
        fpr=fpr,
        auc=auc,
        auc_low=auc_low,
        auc_high=auc_high,
        best_threshold=float(thresholds[best]),
        precision=precision,
        recall=recall,
        f1=f1,
        precision_bounds=wilson_interval(tp_b, tp_b + fp_b, conf) if tp_b + fp_b > 0 else None,
        recall_bounds=wilson_interval(tp_b, n_pos, conf),
        # F1 as a proportion over an effective size of tp + (fp + fn) / 2
        f1_bounds=_wilson_from_rate(f1, f1_den, z) if f1 is not None else None,
        n_positive=n_pos,
        n_negative=n_neg,
    )


# Convergence and method comparison

@dataclass(frozen=True)
class ConvergenceRecord:
    method: str
    setting: str
    iterations: int
    runtime_seconds: float
    converged: bool = True


@dataclass(frozen=True)
class ConvergenceSummary:
    method: str
    setting: str
    fits: int
    converged: int
    mean_iterations: float
    sd_iterations: float
    median_iterations: float
    mean_runtime: float
    sd_runtime: float


def convergence_summary(records: Sequence[ConvergenceRecord]) -> List[ConvergenceSummary]:
    """Mean and standard deviation of outer iterations and runtime per (method, setting)."""
    groups: Dict[Tuple[str, str], List[ConvergenceRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.setting), []).append(r)
    out = []
    for (method, setting), rs in sorted(groups.items()):
        its = np.array([r.iterations for r in rs], dtype=float)
        rts = np.array([r.runtime_seconds for r in rs], dtype=float)
        ddof = 1 if len(rs) > 1 else 0
        out.append(ConvergenceSummary(
            method=method, setting=setting, fits=len(rs), converged=sum(r.converged for r in rs),
            mean_iterations=float(its.mean()), sd_iterations=float(its.std(ddof=ddof)),
            median_iterations=float(np.median(its)),
            mean_runtime=float(rts.mean()), sd_runtime=float(rts.std(ddof=ddof)),
        ))
    return out


@dataclass
class ComparisonTable:
    methods: List[str]
    labels: List[str]
    metrics: Tuple[str, ...] = ("precision", "recall", "tnr", "accuracy")
    cells: Dict[Tuple[str, str, str], Optional[float]] = field(default_factory=dict)

    def header(self) -> List[str]:
        return ["coefficient"] + [f"{m}_{metric}" for m in self.methods for metric in self.metrics]

    def rows(self) -> List[List[Optional[float]]]:
        return [[label] + [self.cells[(m, label, metric)] for m in self.methods for metric in self.metrics]
                for label in self.labels]


def method_comparison_table(reports: Dict[str, SignificanceReport]) -> ComparisonTable:
    """Side-by-side precision, recall, TNR and accuracy per coefficient and method."""
    if not reports:
        raise ValueError("At least one method report is required")
    methods = sorted(reports)
    labels = [r.label for r in reports[methods[0]].coefficients] + ["overall"]
    table = ComparisonTable(methods=methods, labels=labels)
    for m in methods:
        rows = {r.label: r for r in reports[m].coefficients}
        rows["overall"] = reports[m].overall
        for label in labels:
            for metric in table.metrics:
                table.cells[(m, label, metric)] = getattr(rows[label], metric)
    return table


# Delimited output

def format_cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "NA" if not math.isfinite(value) else format(float(value), ".10g")
    return str(value)


def write_table(path, header: Sequence[str], rows) -> Path:
    """Write a comma-separated table with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.info(f"Wrote {path}")
    return path


def significance_rows(method: str, report: SignificanceReport):
    for r in report.coefficients + [report.overall]:
        yield [method, r.label, r.tp, r.fp, r.tn, r.fn, r.precision, r.recall, r.tnr, r.accuracy]


SIGNIFICANCE_HEADER = ["method", "coefficient", "tp", "fp", "tn", "fn", "precision", "recall", "tnr", "accuracy"]


def power_rows(method: str, curves: PowerCurves):
    for label, row in zip(curves.labels, curves.power):
        for a, pw in zip(curves.alpha_grid, row):
            yield [method, label, float(a), float(pw)]


POWER_HEADER = ["method", "coefficient", "alpha", "power"]


def error_rows(method: str, summaries: Sequence[ErrorSummary]):
    for e in summaries:
        yield [method, e.label, e.minimum, e.q1, e.median, e.q3, e.maximum, e.mean_abs]


ERROR_HEADER = ["method", "coefficient", "min", "q1", "median", "q3", "max", "mean_abs"]


def roc_rows(method: str, report: RocReport):
    for t, tp, fp in zip(report.thresholds, report.tpr, report.fpr):
        yield [method, float(t), float(tp), float(fp)]


ROC_HEADER = ["method", "threshold", "tpr", "fpr"]


def roc_summary_row(method: str, report: RocReport) -> list:
    pb = report.precision_bounds or (None, None)
    fb = report.f1_bounds or (None, None)
    return [
        method, report.auc, report.auc_low, report.auc_high, report.best_threshold,
        report.precision, pb[0], pb[1], report.recall, report.recall_bounds[0], report.recall_bounds[1],
        report.f1, fb[0], fb[1], report.n_positive, report.n_negative,
    ]


ROC_SUMMARY_HEADER = [
    "method", "auc", "auc_low", "auc_high", "best_threshold", "precision", "precision_low", "precision_high",
    "recall", "recall_low", "recall_high", "f1", "f1_low", "f1_high", "n_positive", "n_negative",
]
