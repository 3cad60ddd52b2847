import numpy as np
import pytest

from app.exceptions import ConsistencyError, InputError
from app.services import lagrangian
from app.services.ergodic import (
    ErgodicEstimate,
    check_domination,
    continuity_modulus,
    default_probes,
    estimate_mane_discounted,
    estimate_mane_horizon,
    extract_corrector,
    lambda_sequence,
    lax_oleinik_fixed_point,
    mane_closed_form,
    tauberian_check,
)
from app.services.hjb import Grid, SolverConfig, ValueField

BOX = ([-2.0, -2.0], [2.0, 2.0])


def test_default_probes():
    probes = default_probes(1.0, 2)
    assert probes.shape == (9, 2)
    np.testing.assert_array_equal(probes[0], [0.0, 0.0])
    assert np.max(np.abs(probes)) == 1.0


def test_closed_form_for_quadratic(attractor_l):
    assert mane_closed_form(attractor_l, BOX) == 0.0
    assert mane_closed_form(lagrangian.shifted(attractor_l, 0.7), BOX) == pytest.approx(0.7)


def test_closed_form_for_generic_lagrangian():
    spec = lagrangian.generic_lagrangian("1 + (x - 0.5)^2 + y^2 + u1^2 + u2^2", 2, 2)
    assert mane_closed_form(spec, BOX) == pytest.approx(1.0, abs=1e-6)


def test_horizon_estimate_of_constant_cost(grushin, unit_l, small_grid, solver):
    entries = estimate_mane_horizon(grushin, unit_l, small_grid, default_probes(1.0, 2), [1.0, 0.5], solver)
    assert [e.T for e in entries] == [0.5, 1.0]
    for entry in entries:
        assert entry.sup == pytest.approx(1.0, rel=1e-12)
        assert entry.inf == pytest.approx(1.0, rel=1e-12)


def test_probes_must_be_interior(grushin, unit_l, small_grid, solver):
    with pytest.raises(InputError):
        estimate_mane_horizon(grushin, unit_l, small_grid, [[2.0, 0.0]], [1.0], solver)


def test_discounted_estimate_of_constant_cost(grushin, unit_l, small_grid, solver):
    entries = estimate_mane_discounted(grushin, unit_l, small_grid, default_probes(1.0, 2), [1.0, 0.5], solver)
    for entry in entries:
        assert entry.sup == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(InputError):
        estimate_mane_discounted(grushin, unit_l, small_grid, default_probes(1.0, 2), [0.5, 1.0], solver)


def test_tauberian_pairs(grushin, unit_l, small_grid, solver):
    probes = default_probes(1.0, 2)
    estimate = ErgodicEstimate(
        mane_horizon=estimate_mane_horizon(grushin, unit_l, small_grid, probes, [1.0, 2.0], solver),
        mane_discounted=estimate_mane_discounted(grushin, unit_l, small_grid, probes, [1.0, 0.5], solver),
    )
    assert tauberian_check(estimate) <= 1e-4
    assert [(g.T, g.lam) for g in estimate.discrepancies] == [(1.0, 1.0), (2.0, 0.5)]

    with pytest.raises(InputError):
        tauberian_check(ErgodicEstimate(mane_horizon=estimate.mane_horizon))


def test_lambda_sequence_halves():
    assert lambda_sequence(0.4, 4) == [0.4, 0.2, 0.1, 0.05]


def test_zero_field_is_dominated(grushin, attractor_l, small_grid):
    report = check_domination(grushin, attractor_l, ValueField.constant(small_grid), n_trajectories=30, seed=1)
    assert report.passed
    assert report.worst <= 0.0
    assert 0 < report.n_trajectories <= 30


def test_steep_field_is_not_dominated(grushin, attractor_l, small_grid):
    steep = ValueField(small_grid, 100.0 * small_grid.points()[..., 0])
    report = check_domination(grushin, attractor_l, steep, n_trajectories=30, seed=1)
    assert not report.passed
    assert report.violations > 0


def test_corrector_of_constant_cost(euclid2, unit_l, small_grid, solver):
    chi, report = extract_corrector(euclid2, unit_l, small_grid, lambdas=[0.4, 0.2], config=solver,
                                    lipschitz_bases=0)
    np.testing.assert_allclose(chi.values, 0.0, atol=1e-12)
    assert report.mane_shift == pytest.approx(1.0)
    assert report.cauchy_gaps == [0.0]
    assert report.status == "ok"
    assert report.residuals["scheme"] == pytest.approx(0.0, abs=1e-9)

    normalized = lagrangian.shifted(unit_l, -report.mane_shift)
    chi_bar, report = lax_oleinik_fixed_point(euclid2, normalized, chi, solver, report=report, n_domination=20)
    assert report.fixed_point_gap <= solver.tolerance
    assert report.semigroup_time == pytest.approx(0.5)
    assert report.domination_violations == 0
    assert chi_bar.sup_distance(chi) <= 1e-12
    assert len(report.moduli) == 2
    assert report.equicontinuity <= 1e-12


def test_fixed_point_rejects_decreasing_iterates(euclid2, unit_l, small_grid, solver):
    radius = np.linalg.norm(small_grid.points(), axis=-1)
    bump = ValueField(small_grid, np.where(radius <= 0.5, 5.0, 0.0))
    with pytest.raises(ConsistencyError):
        lax_oleinik_fixed_point(euclid2, lagrangian.shifted(unit_l, -1.0), bump, solver, n_domination=10)
    with pytest.raises(InputError):
        lax_oleinik_fixed_point(euclid2, unit_l, bump, solver, t_step=0.0)


@pytest.mark.slow
def test_attractor_corrector_and_critical_value(euclid2, attractor_l):
    grid = Grid.cube(1.5, 31, 2)
    config = SolverConfig(dt=0.05, control_points=15, tolerance=1e-5)
    entries = estimate_mane_horizon(euclid2, attractor_l, grid, default_probes(0.5, 2), [2.0, 4.0, 8.0], config)
    # V_T / T decreases towards min L = 0
    assert entries[-1].sup < entries[0].sup
    assert entries[-1].sup <= 0.15

    chi, report = extract_corrector(euclid2, attractor_l, grid, lambdas=[0.4, 0.2, 0.1], config=config,
                                    lipschitz_bases=1)
    assert chi.at_node([0.0, 0.0]) == pytest.approx(0.0, abs=1e-3)
    assert np.min(chi.values) >= -1e-6
    assert report.sr_lipschitz_samples


def test_shifting_cost_shifts_horizon_estimate(grushin, attractor_l, small_grid, solver):
    probes = default_probes(1.0, 2)
    base = estimate_mane_horizon(grushin, attractor_l, small_grid, probes, [0.5], solver)[0]
    moved = estimate_mane_horizon(grushin, lagrangian.shifted(attractor_l, 0.5), small_grid, probes, [0.5],
                                  solver)[0]
    np.testing.assert_allclose(np.array(moved.values) - np.array(base.values), 0.5, atol=1e-9)


def test_continuity_modulus_of_known_fields():
    grid = Grid((-1.0, 0.0), (1.0, 1.0), (11, 3))  # spacing 0.2 and 0.5
    linear = ValueField(grid, 3.0 * grid.points()[..., 0] - grid.points()[..., 1])
    # pairs within 0.5: up to two steps along x or one along y
    assert continuity_modulus(linear) == pytest.approx(1.2)
    assert continuity_modulus(linear, radius=0.2) == pytest.approx(0.6)
    assert continuity_modulus(ValueField.constant(grid, 4.0)) == 0.0


def test_fixed_point_moduli_stay_bounded(euclid2, attractor_l, small_grid):
    config = SolverConfig(dt=0.05, control_points=11, tolerance=1e-6, boundary="clamp")
    zero = ValueField.constant(small_grid, 0.0)
    _, report = lax_oleinik_fixed_point(euclid2, attractor_l, zero, config, t_step=0.5, max_time=2.0,
                                        n_domination=10)
    assert len(report.moduli) == round(report.semigroup_time / 0.5) + 1
    assert report.moduli[0] == 0.0
    assert all(np.isfinite(report.moduli))
    # the value stays below |x|^2 / sqrt(2)
    assert 0.0 < report.equicontinuity <= 2.0
    assert report.equicontinuity == max(report.moduli)


@pytest.mark.slow
def test_grushin_critical_constant_from_both_limits(grushin, attractor_l, coarse_grid, coarse_solver):
    probes = default_probes(0.5, 2)
    horizon = estimate_mane_horizon(grushin, attractor_l, coarse_grid, probes, [5.0, 10.0, 20.0], coarse_solver)
    per_probe = np.array([entry.values for entry in horizon])
    # V_T / T is nonincreasing in T at every probe and close to min L = 0 at T = 20
    assert np.all(np.diff(per_probe, axis=0) <= 1e-9)
    assert horizon[-1].sup <= 0.15
    assert per_probe[:, 0] == pytest.approx(0.0, abs=1e-12)

    discounted = estimate_mane_discounted(grushin, attractor_l, coarse_grid, probes, [0.2, 0.1, 0.05],
                                          coarse_solver)
    assert discounted[-1].sup <= 0.15

    estimate = ErgodicEstimate(mane_horizon=horizon, mane_discounted=discounted)
    assert tauberian_check(estimate) <= 0.1
    gaps = [pair.gap for pair in estimate.discrepancies]
    assert [pair.T for pair in estimate.discrepancies] == [5.0, 10.0, 20.0]
    assert np.all(np.diff(gaps) <= 1e-9)


@pytest.mark.slow
def test_grushin_corrector_pipeline(grushin, attractor_l):
    grid = Grid.cube(2.0, 81, 2)
    config = SolverConfig(dt=0.05, control_points=21, tolerance=1e-6, boundary="clamp")
    chi, report = extract_corrector(grushin, attractor_l, grid, lambdas=[0.4, 0.2, 0.1, 0.05], config=config,
                                    lipschitz_bases=0)
    assert report.mane_shift == 0.0
    assert np.min(chi.values) >= -1e-6
    assert chi.at_node([0.0, 0.0]) <= 1e-3

    # raises if T_t chi decreases anywhere in the interior
    chi_bar, report = lax_oleinik_fixed_point(grushin, attractor_l, chi, config, report=report)
    assert report.fixed_point_gap <= 1e-4
    assert np.all(chi_bar.values >= chi.values - 2e-6)
    assert report.equicontinuity <= 1.5

    # 1e-3 is the benchmark-resolution tolerance; this mesh is twice as coarse
    for field in (chi, chi_bar):
        assert check_domination(grushin, attractor_l, field, tolerance=5e-3).passed
