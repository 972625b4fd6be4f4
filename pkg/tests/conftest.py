"""Shared fixtures and hypothesis settings."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# numerical property tests routinely exceed hypothesis' default deadline on
# slow CI boxes; correctness is asserted explicitly, wall time is not
settings.register_profile(
    "numeric",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numeric")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_heat():
    """Small zero-driver problem + config: fast and exactly analyzable."""
    from fbsde_llr.config import SolverConfig
    from fbsde_llr.model import builtin_problem

    problem = builtin_problem("linear_heat", 2, horizon=1.0)
    config = SolverConfig(n_steps=8, n_particles=50, seed=1)
    return problem, config
