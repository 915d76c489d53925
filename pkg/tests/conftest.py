"""Shared fixtures: small deterministic populations and samples."""

import numpy as np
import pytest

from smalldom import (PopGenConfig, build_design, default_allocation,
                      draw_sample, generate_population)

#: generator settings for the shared fixtures, pinned explicitly so the
#: constants frozen in the test modules survive retuning of the
#: package-level defaults
SMALL_POP_KWARGS = dict(
    n_units=2000,
    n_domains=6,
    seed=7,
    tax1_log_sd=0.7,
    beta=(5.0, 1.02, 2.0, 1.0, 0.001),
    sigma_eps=0.35,
    contamination=0.01,
    contamination_scale=8.0,
)


@pytest.fixture(scope="session")
def small_pop_kwargs():
    return dict(SMALL_POP_KWARGS)


@pytest.fixture(scope="session")
def small_pop():
    """2,000 units, 6 domains; big enough for every estimator to fit."""
    return generate_population(PopGenConfig(**SMALL_POP_KWARGS))


@pytest.fixture(scope="session")
def small_design(small_pop):
    return build_design(small_pop, default_allocation(small_pop))


@pytest.fixture(scope="session")
def small_sample(small_pop, small_design):
    return draw_sample(small_design, small_pop, 42)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260817)
