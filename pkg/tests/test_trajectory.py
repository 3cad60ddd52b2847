import numpy as np
import pytest

from app.exceptions import DivergenceError, InputError
from app.services import lagrangian, systems
from app.services.hjb import SolverConfig, solve_finite_horizon
from app.services.trajectory import (
    cost,
    direct_minimize,
    gronwall_envelope,
    integrate,
    l2_bounds,
    rollout,
    sample_control,
    uniform_grid,
)


def test_zero_control_stays_put(heisenberg):
    traj = integrate(heisenberg, np.zeros(3), np.zeros(2), uniform_grid(1.0, 20))
    np.testing.assert_array_equal(traj.states, 0.0)


def test_double_integrator_constant_push():
    traj = integrate(systems.double_integrator(), [0.0, 0.0], [1.0], uniform_grid(2.0, 200))
    np.testing.assert_allclose(traj.final_state, [2.0, 2.0], atol=1e-8)


def test_heisenberg_loop_lifts_by_twice_the_area(heisenberg):
    N = 400
    traj = integrate(heisenberg, np.zeros(3), lambda t: [np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)],
                     uniform_grid(1.0, N))
    # midpoint sampling traces a closed regular N-gon with side 1/N
    area = N * (1.0 / N) ** 2 / (4.0 * np.tan(np.pi / N))
    np.testing.assert_allclose(traj.final_state[:2], 0.0, atol=1e-12)
    assert traj.final_state[2] == pytest.approx(-2.0 * area, rel=1e-9)
    assert traj.final_state[2] == pytest.approx(-1.0 / (2.0 * np.pi), rel=1e-4)


def test_sample_control_uses_midpoints():
    times = np.array([0.0, 1.0, 3.0])
    np.testing.assert_allclose(sample_control(lambda t: [t], times, 1), [[0.5], [2.0]])
    with pytest.raises(InputError):
        sample_control(np.zeros((3, 1)), times, 1)


def test_time_grid_must_increase(grushin):
    with pytest.raises(InputError):
        integrate(grushin, [0.0, 0.0], [0.0, 0.0], [0.0, 1.0, 1.0])


def test_divergence_is_reported():
    unstable = systems.linear_system([[50.0]], [[1.0]])
    with pytest.raises(DivergenceError):
        integrate(unstable, [1.0], [0.0], uniform_grid(400.0, 40))


def test_cost_at_rest_point_is_zero(grushin, attractor_l):
    traj = integrate(grushin, attractor_l.x_star, attractor_l.u_star, uniform_grid(3.0, 30))
    assert cost(attractor_l, traj) == 0.0


def test_cost_of_unit_integrand(grushin, attractor_l):
    traj = integrate(grushin, [1.0, 0.0], [0.0, 0.0], uniform_grid(2.0, 10))
    assert cost(attractor_l, traj) == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(traj.integrand, 1.0)


def test_oscillator_cost_matches_fine_reference():
    osc = systems.harmonic_oscillator(0.5)
    spec = lagrangian.quadratic_lagrangian("(x - 0.5)^2 + 0.5*y^2", 2, 1, u_star=[0.5], x_star=[0.5, 0.0])
    coarse = cost(spec, integrate(osc, [1.0, 0.0], [1.0], uniform_grid(2.0, 200)))
    fine = cost(spec, integrate(osc, [1.0, 0.0], [1.0], uniform_grid(2.0, 3200)))
    assert abs(coarse - fine) / fine <= 1e-4


def test_rollout_cost_agrees_with_quadrature(grushin, attractor_l):
    times = uniform_grid(1.0, 40)
    controls = np.tile([0.3, -0.2], (40, 1))
    states, running = rollout(grushin, np.array([0.5, 0.5]), controls, times, attractor_l)
    traj = integrate(grushin, [0.5, 0.5], [0.3, -0.2], times)
    assert running[-1] == pytest.approx(cost(attractor_l, traj), rel=1e-5)
    np.testing.assert_allclose(states, traj.states)


def test_direct_minimize_from_rest_point(grushin, attractor_l):
    traj, value = direct_minimize(grushin, attractor_l, attractor_l.x_star, 2.0, 8, restarts=2, seed=0)
    assert value <= 1e-10
    assert traj.info["restart"] == 0


def test_direct_minimize_straight_line(euclid2):
    spec = lagrangian.quadratic_lagrangian("0", 2, 2)
    y = np.array([1.0, 2.0])
    traj, value = direct_minimize(euclid2, spec, np.zeros(2), 1.0, 8, endpoint=(y, 1e3), restarts=2, seed=1)
    assert value == pytest.approx(0.5 * float(y @ y), rel=0.02)
    assert traj.info["endpoint_residual"] <= 1e-3


def test_direct_minimize_is_deterministic(grushin, attractor_l):
    first, a = direct_minimize(grushin, attractor_l, [1.0, 1.0], 1.0, 6, restarts=3, seed=7)
    second, b = direct_minimize(grushin, attractor_l, [1.0, 1.0], 1.0, 6, restarts=3, seed=7, threads=3)
    assert a == b
    np.testing.assert_array_equal(first.control, second.control)


def test_gronwall_envelope_dominates(heisenberg):
    rng = np.random.default_rng(0)
    controls = rng.normal(size=(50, 2))
    traj = integrate(heisenberg, [0.2, -0.1, 0.3], controls, uniform_grid(1.0, 50))
    assert np.all(np.linalg.norm(traj.states, axis=-1) <= gronwall_envelope(heisenberg, traj) + 1e-12)


def test_l2_bounds(heisenberg):
    rng = np.random.default_rng(1)
    trajs = [integrate(heisenberg, rng.uniform(-1, 1, 3), rng.normal(size=2), uniform_grid(1.0, 64))
             for _ in range(4)]
    report = l2_bounds(heisenberg, trajs)
    assert report.holder_ok
    assert report.kappa >= 0 and report.n_trajectories == 4
    with pytest.raises(InputError):
        l2_bounds(systems.double_integrator(), trajs)


@pytest.mark.slow
def test_direct_minimization_matches_grid_value_on_grushin(grushin, attractor_l, coarse_grid):
    config = SolverConfig(dt=0.05, control_points=21, tolerance=1e-6, boundary="clamp")
    x0 = np.array([0.5, 0.5])
    (field,) = solve_finite_horizon(grushin, attractor_l, coarse_grid, 2.0, config)
    traj, value = direct_minimize(grushin, attractor_l, x0, 2.0, 40, restarts=4, seed=0)
    grid_value = float(field(x0[None, :])[0])
    assert value > 0.0
    assert grid_value == pytest.approx(value, rel=0.15)
