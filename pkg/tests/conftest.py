import numpy as np
import pytest

from cvxmarg.model import ParameterSet, build_grid_model
from cvxmarg.polytope import build_constraints


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def random_params(graph, rng, scale=0.5):
    layout = graph.param_layout()
    return ParameterSet(layout, scale * rng.standard_normal(layout.size))


def random_observation(graph, rng):
    return (rng.random(graph.num_observed) < 0.5).astype(np.int64)


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture(scope="session")
def edge():
    g = build_grid_model(1, 2)
    return g, build_constraints(g)


@pytest.fixture(scope="session")
def grid2():
    g = build_grid_model(2, 2)
    return g, build_constraints(g)


@pytest.fixture(scope="session")
def grid3():
    g = build_grid_model(3, 3)
    return g, build_constraints(g)
