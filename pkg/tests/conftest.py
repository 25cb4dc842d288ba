import numpy as np
import pytest

from hmmar import HmMarParams


def random_params(rng, K, p, sigma_range=(0.4, 1.5)):
    return HmMarParams(
        coeffs=rng.normal(scale=0.5, size=(K, p + 1)),
        sigmas=rng.uniform(*sigma_range, size=K),
        rho=rng.dirichlet(np.ones(K)),
        trans=rng.dirichlet(np.ones(K), size=K),
    )


@pytest.fixture
def make_params():
    return random_params


@pytest.fixture
def two_state():
    """Well separated HM-MAR(2, 1) used by several modules."""
    return HmMarParams(
        coeffs=[[1.0, 0.5], [-1.0, -0.3]],
        sigmas=[0.5, 0.5],
        rho=[0.5, 0.5],
        trans=[[0.9, 0.1], [0.2, 0.8]],
    )
