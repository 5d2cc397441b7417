import math

import pytest

import tcband as tb


@pytest.fixture(scope="session")
def p0():
    """Reference parameter set: r = 0, mu = 0.1, sigma = sqrt(2), gamma = 1."""
    return tb.MarketParams(mu=0.1, sigma=math.sqrt(2.0), r=0.0, T=1.0,
                           gamma=1.0, epsilon=1e-3)


@pytest.fixture(scope="session")
def p0_eps(p0):
    def make(eps):
        return tb.MarketParams(mu=p0.mu, sigma=p0.sigma, r=p0.r, T=p0.T,
                               gamma=p0.gamma, epsilon=eps)
    return make


@pytest.fixture(scope="session")
def call_claim(p0):
    return tb.mollified_call_claim(1.0, 1.0, p0)


@pytest.fixture(scope="session")
def rate_params():
    """A positive-rate variant for exercising the r-dependent machinery."""
    return tb.MarketParams(mu=0.08, sigma=0.4, r=0.02, T=2.0, gamma=0.5,
                           epsilon=4e-3)
