import numpy as np
import pytest

from forestfire.core import MassDistribution
from forestfire.kinetics import solve_cffe


@pytest.fixture(scope="session")
def mono():
    return MassDistribution.point_mass(1)


@pytest.fixture(scope="session")
def small_env(mono):
    """Coarse monodisperse environment for fast unit tests (K=512, T=3)."""
    return solve_cffe(mono, 512, T=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def long_env(mono):
    """Coarse environment reaching far past gelation (K=256, T=12)."""
    return solve_cffe(mono, 256, T=12.0)
