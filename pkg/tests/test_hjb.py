import dataclasses

import numpy as np
import pytest

from app.exceptions import DivergenceError, InputError
from app.services import lagrangian
from app.services.hjb import (
    BellmanOperator,
    Grid,
    ValueField,
    align_dt,
    bellman_step,
    control_mesh,
    interpolate,
    lax_oleinik_apply,
    scheme_residual,
    solve_discounted,
    solve_finite_horizon,
)


def test_grid_validation():
    with pytest.raises(InputError):
        Grid((-1.0,), (1.0,), (2,))
    with pytest.raises(InputError):
        Grid.cube(1.0, 5, 4)
    with pytest.raises(InputError):
        Grid((1.0, 0.0), (0.0, 1.0), (5, 5))


def test_grid_geometry(small_grid):
    assert small_grid.shape == (21, 21)
    np.testing.assert_allclose(small_grid.spacing, [0.2, 0.2])
    assert small_grid.nearest_index([0.0, 0.0]) == (10, 10)
    assert small_grid.points().shape == (21, 21, 2)
    assert small_grid.contains([2.0, -2.0]) and not small_grid.contains([2.1, 0.0])


def test_interpolation_reproduces_linear_functions(small_grid):
    values = small_grid.points() @ np.array([1.0, 2.0])
    points = np.array([[0.13, -0.77], [1.95, 1.01], [-2.1, 0.0]])
    np.testing.assert_allclose(interpolate(small_grid, values, points), points @ [1.0, 2.0], atol=1e-12)


def test_boundary_rules_beyond_the_box(small_grid):
    values = small_grid.points()[..., 0]
    far = np.array([[-3.0, 0.0]])
    # one ghost layer, constant beyond it
    np.testing.assert_allclose(interpolate(small_grid, values, far), [-2.2])
    np.testing.assert_allclose(interpolate(small_grid, values, far, boundary="clamp"), [-2.0])
    with pytest.raises(InputError):
        interpolate(small_grid, values, far, boundary="periodic")


def test_value_field_checks(small_grid):
    with pytest.raises(InputError):
        ValueField(small_grid, np.zeros((3, 3)))
    bad = np.zeros(small_grid.shape)
    bad[4, 4] = np.nan
    with pytest.raises(DivergenceError):
        ValueField(small_grid, bad)
    shifted = ValueField.constant(small_grid, 1.0) + 2.0
    assert shifted.at_node([0.3, 0.3]) == 3.0


def test_control_mesh_contains_u_star(solver):
    spec = lagrangian.quadratic_lagrangian("x^2", 1, 2, u_star=[0.25, -0.1])
    mesh = control_mesh(spec, solver)
    assert np.any(np.all(np.isclose(mesh, [0.25, -0.1]), axis=-1))
    assert np.all(np.linalg.norm(mesh, axis=-1) <= 3.0 + 1e-9)


def test_align_dt():
    assert align_dt(0.05, [0.5, 1.0]) == pytest.approx(0.05)
    aligned = align_dt(0.03, [1.0])
    assert aligned <= 0.03
    assert (1.0 / aligned) == pytest.approx(round(1.0 / aligned))


def test_operator_rejects_mismatched_dimensions(heisenberg, attractor_l, small_grid, solver):
    with pytest.raises(InputError):
        BellmanOperator(heisenberg, attractor_l, small_grid, solver, 0.05)


def test_operator_threads_agree(grushin, attractor_l, small_grid, solver):
    values = np.linalg.norm(small_grid.points(), axis=-1)
    single, arg1 = BellmanOperator(grushin, attractor_l, small_grid, solver, 0.05).apply(values)
    threaded = dataclasses.replace(solver, threads=3)
    multi, arg3 = BellmanOperator(grushin, attractor_l, small_grid, threaded, 0.05).apply(values)
    np.testing.assert_array_equal(single, multi)
    np.testing.assert_array_equal(arg1, arg3)


def test_finite_horizon_of_constant_cost(grushin, unit_l, small_grid, solver):
    fields = solve_finite_horizon(grushin, unit_l, small_grid, 1.0, solver, checkpoints=[0.5, 1.0])
    assert [f.meta["time"] for f in fields] == [0.5, 1.0]
    np.testing.assert_allclose(fields[0].values, 0.5, rtol=1e-12)
    np.testing.assert_allclose(fields[1].values, 1.0, rtol=1e-12)


def test_finite_horizon_monotone_and_zero_at_rest_point(grushin, attractor_l, small_grid, solver):
    clamp = dataclasses.replace(solver, boundary="clamp")
    short, long = solve_finite_horizon(grushin, attractor_l, small_grid, 1.0, clamp, checkpoints=[0.5, 1.0])
    assert np.all(short.values >= 0.0)
    assert np.all(long.values >= short.values - 1e-12)
    assert long.at_node([0.0, 0.0]) == 0.0


def test_finite_horizon_rejects_bad_checkpoints(grushin, unit_l, small_grid, solver):
    with pytest.raises(InputError):
        solve_finite_horizon(grushin, unit_l, small_grid, 1.0, solver, checkpoints=[2.0])
    with pytest.raises(InputError):
        solve_finite_horizon(grushin, unit_l, small_grid, 0.0, solver)


def test_discounted_constant_cost(grushin, unit_l, small_grid, solver):
    result = solve_discounted(grushin, unit_l, small_grid, 2.0, solver)
    np.testing.assert_allclose(result.values, 0.5, atol=1e-5)
    assert result.meta["lam"] == 2.0
    with pytest.raises(InputError):
        solve_discounted(grushin, unit_l, small_grid, 0.0, solver)


def test_discounted_warm_start_reaches_same_fixed_point(grushin, attractor_l, small_grid, solver):
    clamp = dataclasses.replace(solver, boundary="clamp")
    cold = solve_discounted(grushin, attractor_l, small_grid, 1.0, clamp)
    warm = solve_discounted(grushin, attractor_l, small_grid, 1.0, clamp,
                            initial=ValueField.constant(small_grid, 0.3))
    assert cold.sup_distance(warm) <= 1e-5


def test_lax_oleinik_identity_and_constant_cost(heisenberg, solver):
    grid = Grid.cube(1.0, 9, 3)
    spec = lagrangian.constant_lagrangian(1.0, 3, 2)
    phi = ValueField(grid, np.linalg.norm(grid.points(), axis=-1))
    np.testing.assert_array_equal(lax_oleinik_apply(heisenberg, spec, phi, 0.0, solver).values, phi.values)
    zero = ValueField.constant(grid)
    np.testing.assert_allclose(lax_oleinik_apply(heisenberg, spec, zero, 0.4, solver).values, 0.4, rtol=1e-12)


def test_lax_oleinik_semigroup_and_shift(grushin, attractor_l, small_grid, solver):
    phi = ValueField(small_grid, np.abs(small_grid.points()[..., 0]))
    half = lax_oleinik_apply(grushin, attractor_l, phi, 0.2, solver)
    twice = lax_oleinik_apply(grushin, attractor_l, half, 0.2, solver)
    once = lax_oleinik_apply(grushin, attractor_l, phi, 0.4, solver)
    assert twice.sup_distance(once) <= 1e-12

    moved = lax_oleinik_apply(grushin, attractor_l, phi + 1.5, 0.2, solver)
    assert np.max(np.abs(moved.values - half.values - 1.5)) <= 1e-12

    with pytest.raises(InputError):
        lax_oleinik_apply(grushin, attractor_l, phi, -1.0, solver)


def test_scheme_residual_of_constant_field(grushin, unit_l, small_grid, solver):
    report, per_node = scheme_residual(grushin, unit_l, ValueField.constant(small_grid, 3.0), solver)
    # T_dt c = c + dt for L == 1
    assert report.residual == pytest.approx(1.0, rel=1e-9)
    assert report.dt == solver.dt
    assert per_node.values[0, 0] == 0.0


def test_scheme_residual_reports_hamiltonian_for_quadratic(euclid2, small_grid, solver):
    spec = lagrangian.quadratic_lagrangian("0", 2, 2)
    report, _ = scheme_residual(euclid2, spec, ValueField.constant(small_grid), solver)
    assert report.residual == pytest.approx(0.0, abs=1e-12)
    assert report.hamiltonian_residual == pytest.approx(0.0, abs=1e-12)


def test_clamped_update_is_monotone(grushin, attractor_l, small_grid, solver):
    clamp = dataclasses.replace(solver, boundary="clamp")
    op = BellmanOperator(grushin, attractor_l, small_grid, clamp, 0.05, direction=-1)
    rng = np.random.default_rng(11)
    for _ in range(100):
        phi = rng.normal(size=small_grid.shape)
        psi = phi + rng.uniform(0.0, 1.0, size=small_grid.shape)
        low, _ = op.apply(phi)
        high, _ = op.apply(psi)
        assert np.all(low <= high + 1e-12)


def test_one_more_step_is_one_bellman_update(grushin, attractor_l, small_grid, solver):
    v_T, v_next = solve_finite_horizon(grushin, attractor_l, small_grid, 0.55, solver, checkpoints=[0.5, 0.55])
    assert v_T.meta["dt"] == pytest.approx(0.05)
    op = BellmanOperator(grushin, attractor_l, small_grid, solver, v_T.meta["dt"], direction=1)
    stepped = bellman_step(op, v_T)
    np.testing.assert_allclose(stepped.values, v_next.values, rtol=0.0, atol=1e-12)


def test_discounted_update_contracts_by_exp_lambda_dt(grushin, attractor_l, small_grid, solver):
    clamp = dataclasses.replace(solver, boundary="clamp")
    lam, dt = 0.5, 0.05
    factor = float(np.exp(-lam * dt))
    op = BellmanOperator(grushin, attractor_l, small_grid, clamp, dt, direction=1,
                         discount=factor, cost_weight=-np.expm1(-lam * dt) / lam)
    rng = np.random.default_rng(5)
    for _ in range(20):
        phi = rng.normal(size=small_grid.shape)
        psi = rng.normal(size=small_grid.shape)
        a, _ = op.apply(phi)
        b, _ = op.apply(psi)
        assert np.max(np.abs(a - b)) <= factor * np.max(np.abs(phi - psi)) + 1e-12
