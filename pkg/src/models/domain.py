"""In-memory domain records shared by the numerical services.

These hold numpy arrays and never cross the wire; the pydantic models in
``src.models.schemas`` are the serializable counterparts.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class SiteData:
    """Rows held by one site of a horizontally partitioned dataset."""
    site_id: int
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"Site {self.site_id}: design matrix must be 2-D, got shape {X.shape}")
        if X.shape[0] < 1:
            raise ValueError(f"Site {self.site_id}: at least one row is required")
        if y.shape != (X.shape[0],):
            raise ValueError(f"Site {self.site_id}: outcome length {y.shape} does not match {X.shape[0]} rows")
        if not np.all(X[:, 0] == 1.0):
            raise ValueError(f"Site {self.site_id}: first covariate column must be the intercept (all ones)")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError(f"Site {self.site_id}: outcomes must be 0 or 1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __eq__(self, other):
        if not isinstance(other, SiteData):
            return NotImplemented
        return (
            self.site_id == other.site_id
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None

    @property
    def n_i(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


    def take(self, index: Sequence[int]) -> "SiteData":
        """Return a new site holding only the given rows, in the given order."""
        index = np.asarray(index, dtype=int)
        return SiteData(site_id=self.site_id, X=self.X[index], y=self.y[index])


class MethodKind(str, Enum):
    """Approximation of the per-site marginal likelihood."""
    LA = "la"
    GH = "gh"


@dataclass(frozen=True)
class ApproximationMethod:
    """Laplace or adaptive Gauss-Hermite of a given order (LA is GH with K=1)."""
    kind: MethodKind = MethodKind.GH
    gh_order: int = 2

    def __post_init__(self):
        if not 1 <= self.gh_order <= 20:
            raise ValueError(f"Gauss-Hermite order must be in [1, 20], got {self.gh_order}")

    @property
    def order(self) -> int:
        return 1 if self.kind == MethodKind.LA else self.gh_order

    @classmethod
    def laplace(cls) -> "ApproximationMethod":
        return cls(kind=MethodKind.LA, gh_order=1)

    @classmethod
    def gauss_hermite(cls, order: int) -> "ApproximationMethod":
        return cls(kind=MethodKind.GH, gh_order=order)


@dataclass(frozen=True)
class HermiteRule:
    """Physicists' Gauss-Hermite nodes and weights of order K."""
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


@dataclass(frozen=True)
class RandomEffectMode:
    """Mode of g for one site and its curvature scale omega = sqrt(-1/g_mumu)."""
    mu_hat: float
    omega_hat: float
    g_mumu: float
    iterations: int = 0


@dataclass(frozen=True)
class GDerivatives:
    """Analytic derivatives of g at a single mu."""
    g_mu: float
    g_mumu: float
    g_beta: np.ndarray
    g_betabeta: np.ndarray
    g_mubeta: np.ndarray
    g_tau: float
