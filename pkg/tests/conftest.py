"""Shared fixtures: small systems, Lagrangians and grids sized for fast runs."""
import pytest

from app.services import hjb, lagrangian, systems
from app.utils import metrics


@pytest.fixture(autouse=True)
def _reset_metrics():
    metrics.reset()
    yield


@pytest.fixture
def heisenberg():
    return systems.heisenberg()


@pytest.fixture
def grushin():
    return systems.grushin("x")


@pytest.fixture
def euclid2():
    return systems.euclidean(2)


@pytest.fixture
def attractor_l():
    """1/2|u|^2 + x^2 + y^2 on a two-dimensional state with two controls."""
    return lagrangian.quadratic_lagrangian("x^2 + y^2", 2, 2, ell1=6.0, theta=0.5, K_radius=1.0,
                                           beta="1 + r^2", normalized=True)


@pytest.fixture
def unit_l():
    return lagrangian.constant_lagrangian(1.0, 2, 2)


@pytest.fixture
def small_grid():
    return hjb.Grid.cube(2.0, 21, 2)


@pytest.fixture
def solver():
    return hjb.SolverConfig(dt=0.05, control_points=11, tolerance=1e-6)


@pytest.fixture
def coarse_grid():
    """[-2, 2]^2 at h = 0.1, the grushin benchmark box on a coarser mesh."""
    return hjb.Grid.cube(2.0, 41, 2)


@pytest.fixture
def coarse_solver():
    return hjb.SolverConfig(dt=0.05, control_points=11, tolerance=1e-6, boundary="clamp")
