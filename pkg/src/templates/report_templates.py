"""Text templates for fitted-model reports."""

import logging
from typing import List, Optional, Sequence

from src.models.schemas import FitResult

logger = logging.getLogger(__name__)

COLUMNS = ("Coef.", "Std.Err.", "z", "P>|z|", "[0.025", "0.975]")


def _num(value: Optional[float], width: int = 10) -> str:
    if value is None:
        return "NA".rjust(width)
    return f"{value:{width}.4f}"


def _delta(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.3e}"


def _method_label(result: FitResult) -> str:
    return "Laplace" if result.method == "la" else f"Gauss-Hermite (K={result.gh_order})"


class CoefficientTableTemplate:
    """Renders a FitResult as the familiar regression summary block."""

    @staticmethod
    def coefficient_rows(result: FitResult, names: Optional[Sequence[str]] = None) -> List[List[object]]:
        """Coefficient rows as values: name, coef, std err, z, p, ci low, ci high."""
        p = len(result.beta_hat)
        names = list(names) if names is not None else [f"X{j}" for j in range(1, p + 1)]
        rows = []
        for j in range(p):
            if result.inference_available:
                rows.append([names[j], result.beta_hat[j], result.std_err[j], result.z[j], result.p_values[j],
                             result.ci_low[j], result.ci_high[j]])
            else:
                rows.append([names[j], result.beta_hat[j], None, None, None, None, None])
        return rows

    @staticmethod
    def render(result: FitResult, names: Optional[Sequence[str]] = None) -> str:
        """Render the summary header and the coefficient table.

        Args:
            result: Fitted model
            names: Optional covariate names (defaults to X1..Xp)

        Returns:
            Multi-line plain-text report
        """
        status = "converged" if result.converged else "NOT converged"
        lines = [
            "Federated random-intercept logistic regression",
            "=" * 78,
            f"Method:            {_method_label(result)}",
            f"Lambda:            {result.lambda_hat:g}",
            f"Sites:             {len(result.site_ids)}",
            f"Observations:      {result.n_observations} (validation {result.n_validation})",
            f"Log-likelihood:    {_num(result.loglik, 0)}",
            f"AIC:               {_num(result.aic, 0)}",
            f"BIC:               {_num(result.bic, 0)}",
            f"Tau (RE sd):       {result.tau_hat:.6f}",
            f"Iterations:        {result.iterations} ({status}, final |dtheta| = {_delta(result.final_delta)})",
            "-" * 78,
            f"{'':8}" + "".join(c.rjust(10) for c in COLUMNS),
        ]
        for row in CoefficientTableTemplate.coefficient_rows(result, names):
            lines.append(f"{str(row[0]):8}" + "".join(_num(v) for v in row[1:]))
        lines.append("=" * 78)
        if not result.inference_available:
            lines.append("Standard errors unavailable: the information matrix is singular at the estimate.")
        return "\n".join(lines) + "\n"

    @staticmethod
    def render_candidates(result: FitResult) -> str:
        """One line per lambda candidate of the sweep."""
        lines = [f"{'lambda':>8} {'conv':>5} {'iter':>5} {'train ll':>14} {'valid AIC':>14} {'valid BIC':>14}"]
        for c in result.candidates:
            lines.append(
                f"{c.lambda_value:8g} {('yes' if c.converged else 'no'):>5} {c.iterations:5d} "
                f"{_num(c.train_loglik, 14)} {_num(c.validation_aic, 14)} {_num(c.validation_bic, 14)}"
            )
        return "\n".join(lines) + "\n"
