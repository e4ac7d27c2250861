"""Shared fixtures: small random sites and parameter draws."""

import numpy as np
import pytest

from src.models.domain import SiteData
from src.models.schemas import Theta
from src.services.model_core import sigmoid


def make_site(rng, n, p, site_id=1, beta=None, mu=0.0):
    """Random logistic site with an intercept column and p - 1 normal covariates."""
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p > 1 else np.ones((n, 1))
    beta = rng.normal(scale=0.5, size=p) if beta is None else np.asarray(beta, dtype=float)
    y = (rng.random(n) < sigmoid(X @ beta + mu)).astype(float)
    return SiteData(site_id=site_id, X=X, y=y)


def random_theta(rng, p):
    return Theta.from_arrays(rng.normal(scale=0.5, size=p), rng.uniform(0.5, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def site_factory(rng):
    def factory(n=20, p=3, site_id=1, beta=None, mu=0.0):
        return make_site(rng, n, p, site_id=site_id, beta=beta, mu=mu)
    return factory


@pytest.fixture
def one_row_site():
    return SiteData(site_id=1, X=np.array([[1.0]]), y=np.array([1.0]))


def make_sites(rng, m, n, p, beta=None, tau=1.0):
    beta = rng.normal(scale=0.5, size=p) if beta is None else np.asarray(beta, dtype=float)
    return [make_site(rng, n, p, site_id=i + 1, beta=beta, mu=rng.normal(scale=tau)) for i in range(m)]
