"""Pydantic models for parameters, exchanged statistics, fit results and wire messages."""

import math
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import settings


def _check_finite(values, name: str):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return values


class StrictModel(BaseModel):
    """Base for every record that is validated on decode: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", frozen=True)


# Model parameters

class Theta(StrictModel):
    """Global parameter state: fixed effects and random-effect standard deviation."""
    beta: List[float] = Field(..., min_length=1, description="Fixed-effect coefficients, intercept first")
    tau: float = Field(..., gt=0.0, description="Random-intercept standard deviation")

    @field_validator("beta")
    @classmethod
    def _beta_finite(cls, v):
        return _check_finite(v, "beta")

    @field_validator("tau")
    @classmethod
    def _tau_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("tau must be finite")
        return v

    @property
    def beta_array(self) -> np.ndarray:
        return np.asarray(self.beta, dtype=float)

    @property
    def p(self) -> int:
        return len(self.beta)

    @classmethod
    def from_arrays(cls, beta, tau: float) -> "Theta":
        return cls(beta=[float(b) for b in np.asarray(beta, dtype=float)], tau=float(tau))


class SiteSummary(StrictModel):
    """Statistics one site transmits per round.

    The score and Hessian are derivatives of the penalized local log-likelihood
    with respect to beta; dtau is its first derivative with respect to tau.
    """
    site_id: int
    p: int = Field(..., ge=1)
    score: List[float]
    hessian: List[List[float]]
    loglik: float
    mu_hat: float
    omega_hat: float = Field(..., gt=0.0)
    dtau: float
    n_i: int = Field(..., ge=1)
    beta_echo: List[float]
    tau_echo: float = Field(..., gt=0.0)
    lambda_echo: float = Field(..., ge=0.0)
    k_echo: int = Field(..., ge=1, le=20)

    @model_validator(mode="after")
    def _check_shapes(self):
        if len(self.score) != self.p or len(self.beta_echo) != self.p:
            raise ValueError(f"score/beta_echo length must equal p={self.p}")
        if len(self.hessian) != self.p or any(len(row) != self.p for row in self.hessian):
            raise ValueError(f"hessian must be {self.p}x{self.p}")
        H = np.asarray(self.hessian, dtype=float)
        _check_finite(H, "hessian")
        _check_finite(self.score, "score")
        _check_finite([self.loglik, self.mu_hat, self.omega_hat, self.dtau, self.tau_echo, self.lambda_echo], "scalars")
        _check_finite(self.beta_echo, "beta_echo")
        scale = max(1.0, float(np.max(np.abs(H))))
        if np.max(np.abs(H - H.T)) > 1e-9 * scale:
            raise ValueError("hessian must be symmetric")
        return self

    @property
    def score_array(self) -> np.ndarray:
        return np.asarray(self.score, dtype=float)

    @property
    def hessian_array(self) -> np.ndarray:
        return np.asarray(self.hessian, dtype=float)


# Fitting configuration

class ConvergenceConfig(StrictModel):
    """Stopping rules and damping schedule of the global Newton loop."""
    theta_tol: float = Field(default=settings.THETA_TOL, gt=0.0)
    mu_tol: float = Field(default=settings.MU_TOL, gt=0.0)
    max_outer_iters: int = Field(default=settings.MAX_OUTER_ITERS, gt=0)
    damping_init: float = Field(default=1e-8, gt=0.0)
    damping_growth: float = Field(default=10.0, gt=1.0)
    damping_cap: float = Field(default=1e8, gt=0.0)
    max_tau_halvings: int = Field(default=20, ge=0)
    max_log_tau_step: float = Field(default=3.0, gt=0.0)


class ModelConfig(StrictModel):
    """What is fitted: approximation, penalty sweep, and random-effect options."""
    method: Literal["la", "gh"] = "gh"
    gh_order: int = Field(default=2, ge=1, le=20)
    lambda_grid: List[float] = Field(default_factory=lambda: list(settings.LAMBDA_GRID))
    penalize_intercept: bool = False
    fix_tau: bool = False
    tau_init: float = Field(default=1.0, gt=0.0)
    split_ratio: float = Field(default=settings.SPLIT_RATIO, gt=0.0, lt=1.0)
    split_seed: int = settings.DEFAULT_SEED

    @field_validator("lambda_grid")
    @classmethod
    def _grid_non_negative(cls, v):
        if not v:
            raise ValueError("lambda_grid must not be empty")
        if any(lam < 0 or not math.isfinite(lam) for lam in v):
            raise ValueError("lambda values must be finite and non-negative")
        return v

    @property
    def order(self) -> int:
        return 1 if self.method == "la" else self.gh_order


# Fit results

class TrajectoryPoint(StrictModel):
    iteration: int
    delta_theta: float
    loglik: float
    damping: float
    max_delta_mu: float


class CandidateResult(StrictModel):
    """Outcome of one lambda candidate of the sweep."""
    lambda_value: float
    converged: bool
    iterations: int
    train_loglik: Optional[float] = None
    validation_loglik: Optional[float] = None
    validation_aic: Optional[float] = None
    validation_bic: Optional[float] = None
    error: Optional[str] = None


class FitResult(StrictModel):
    """Converged estimates with Wald inference, information criteria and diagnostics."""
    method: Literal["la", "gh"]
    gh_order: int
    beta_hat: List[float]
    tau_hat: float
    site_ids: List[int]
    mu_hats: List[float]
    lambda_hat: float
    loglik: Optional[float] = None
    aic: Optional[float] = None
    bic: Optional[float] = None
    n_observations: int
    validation_loglik: Optional[float] = None
    validation_aic: Optional[float] = None
    validation_bic: Optional[float] = None
    n_validation: int = 0
    inference_available: bool = True
    std_err: Optional[List[float]] = None
    z: Optional[List[float]] = None
    p_values: Optional[List[float]] = None
    ci_low: Optional[List[float]] = None
    ci_high: Optional[List[float]] = None
    iterations: int
    converged: bool
    final_delta: Optional[float] = None
    runtime_seconds: float = 0.0
    trajectory: List[TrajectoryPoint] = Field(default_factory=list)
    candidates: List[CandidateResult] = Field(default_factory=list)

    def without_timing(self) -> "FitResult":
        """Copy with wall-clock fields zeroed, for byte-stable comparisons."""
        return self.model_copy(update={"runtime_seconds": 0.0})


# Wire messages

class HelloMessage(StrictModel):
    type: Literal["HELLO"] = "HELLO"
    site_id: int
    n_i: int = Field(..., ge=1)
    p: int = Field(..., ge=1)
    protocol_version: int


class ConfigMessage(StrictModel):
    type: Literal["CONFIG"] = "CONFIG"
    method: Literal["la", "gh"]
    gh_order: int = Field(..., ge=1, le=20)
    lambda_value: float = Field(..., ge=0.0)
    penalize_intercept: bool
    split_ratio: float = Field(..., gt=0.0, lt=1.0)
    split_seed: int


class ComputeMessage(StrictModel):
    type: Literal["COMPUTE"] = "COMPUTE"
    round: int = Field(..., ge=0)
    beta: List[float]
    tau: float = Field(..., gt=0.0)
    partition: Literal["train", "validation"] = "train"


class SummaryMessage(StrictModel):
    type: Literal["SUMMARY"] = "SUMMARY"
    round: int = Field(..., ge=0)
    payload: SiteSummary


class ResultMessage(StrictModel):
    type: Literal["RESULT"] = "RESULT"
    result: FitResult


class AbortMessage(StrictModel):
    type: Literal["ABORT"] = "ABORT"
    reason: str


class ByeMessage(StrictModel):
    type: Literal["BYE"] = "BYE"


Message = Annotated[
    Union[HelloMessage, ConfigMessage, ComputeMessage, SummaryMessage, ResultMessage, AbortMessage, ByeMessage],
    Field(discriminator="type"),
]


# Command-line run configuration

class RunConfig(StrictModel):
    """Settings merged from a KEY=VALUE file and command-line flags."""
    method: Literal["la", "gh"] = "gh"
    gh_order: int = Field(default=2, ge=1, le=20)
    lambda_: Union[Literal["auto"], float] = Field(default="auto", alias="lambda")
    penalize_intercept: bool = False
    fix_tau: bool = False
    tau_init: float = Field(default=1.0, gt=0.0)
    seed: int = settings.DEFAULT_SEED
    split_ratio: float = Field(default=settings.SPLIT_RATIO, gt=0.0, lt=1.0)
    theta_tol: float = Field(default=settings.THETA_TOL, gt=0.0)
    mu_tol: float = Field(default=settings.MU_TOL, gt=0.0)
    max_outer_iters: int = Field(default=settings.MAX_OUTER_ITERS, gt=0)
    host: str = "127.0.0.1"
    port: int = Field(default=7610, ge=0, le=65535)
    expected_sites: int = Field(default=1, ge=1)
    round_timeout: float = Field(default=settings.ROUND_TIMEOUT, gt=0.0)
    capture_path: Optional[str] = None

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    def model_config_for_fit(self) -> ModelConfig:
        grid = list(settings.LAMBDA_GRID) if self.lambda_ == "auto" else [float(self.lambda_)]
        return ModelConfig(
            method=self.method,
            gh_order=1 if self.method == "la" else self.gh_order,
            lambda_grid=grid,
            penalize_intercept=self.penalize_intercept,
            fix_tau=self.fix_tau,
            tau_init=self.tau_init,
            split_ratio=self.split_ratio,
            split_seed=self.seed,
        )

    def convergence_config(self) -> ConvergenceConfig:
        return ConvergenceConfig(
            theta_tol=self.theta_tol,
            mu_tol=self.mu_tol,
            max_outer_iters=self.max_outer_iters,
        )


# Status API

class HealthResponse(BaseModel):
    """Response model for health check."""
    status: str


class SessionStatusResponse(BaseModel):
    """Snapshot of a running coordinator session."""
    state: str
    expected_sites: int
    registered_sites: List[int]
    round: int
    lambda_value: Optional[float] = None
    theta: Optional[Theta] = None
    trajectory: List[TrajectoryPoint] = Field(default_factory=list)
    message: Optional[str] = None
