import numpy as np
import pytest

from buffer_geometry import AuxPolytope, enumerate_vertices
from environments import CartPole, DoubleIntegrator, Shuttle
from police_policy import policy_from_affine
from tests.helpers import QuadraticDrift, make_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pendulum_spec():
    return make_spec(
        2,
        y_min=0.1,
        y_max=0.2,
        ydot_max=1.0,
        lower_bounds=np.array([0.1, 0.0]),
        aux=AuxPolytope.box([-0.9, -1.0], [0.9, 1.0]),
    )


@pytest.fixture
def shuttle_spec():
    return make_spec(
        2,
        y_min=-50.0,
        y_max=0.0,
        ydot_max=100.0,
        lower_bounds=np.array([-50.0, 6.0]),
        aux=AuxPolytope.box([-0.7853981633974483], [-0.008726646259971648]),
    )


@pytest.fixture
def unit_spec():
    """Double-integrator buffer: y in [0, 1], y' in [0, 1 - y]"""
    return make_spec(2, lower_bounds=np.array([0.0, 0.0]))


@pytest.fixture
def cartpole():
    return CartPole()


@pytest.fixture
def shuttle():
    return Shuttle()


@pytest.fixture
def double_integrator():
    return DoubleIntegrator()


@pytest.fixture
def quadratic_drift():
    return QuadraticDrift()


@pytest.fixture
def hand_policy(double_integrator, unit_spec):
    """u = -2 eps - beta y' - 1 with eps = 0.1, beta = 1"""
    return policy_from_affine(
        np.array([[0.0, -1.0]]),
        np.array([-1.2]),
        enumerate_vertices(unit_spec),
        low=double_integrator.u_low,
        high=double_integrator.u_high,
    )
