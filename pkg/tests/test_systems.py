import numpy as np
import pytest

from app.exceptions import InputError
from app.schemas.experiment import parse_config
from app.services import systems
from app.services.benchmarks import BENCHMARKS, benchmark_config


def test_heisenberg_dynamics(heisenberg):
    np.testing.assert_allclose(systems.eval_dynamics(heisenberg, [1.0, 2.0, 3.0], [1.0, 0.0]), [1.0, 0.0, 2.0])


def test_grushin_dynamics(grushin):
    np.testing.assert_allclose(systems.eval_dynamics(grushin, [2.0, 5.0], [0.0, 1.0]), [0.0, 2.0])


def test_double_integrator_dynamics():
    di = systems.double_integrator()
    np.testing.assert_allclose(systems.eval_dynamics(di, [1.0, 1.0], [3.0]), [1.0, 3.0])


def test_dynamics_broadcast_over_leading_axes(heisenberg):
    x = np.zeros((4, 1, 3))
    u = np.ones((1, 5, 2))
    assert systems.eval_dynamics(heisenberg, x, u).shape == (4, 5, 3)


def test_dimension_mismatch_raises(heisenberg):
    with pytest.raises(InputError):
        systems.eval_dynamics(heisenberg, [0.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize("point", [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5], [0.3, 0.7, -4.0]])
def test_heisenberg_bracket(heisenberg, point):
    X1, X2 = heisenberg.fields
    np.testing.assert_allclose(systems.lie_bracket(X2, X1, np.array(point)), [0.0, 0.0, 2.0], atol=1e-6)
    np.testing.assert_allclose(systems.lie_bracket(X1, X2, np.array(point)),
                               heisenberg.exact_brackets[(0, 1)](np.array(point)), atol=1e-6)


@pytest.mark.parametrize("point", [[0.0, 0.0], [1.5, -1.0]])
def test_grushin_bracket(grushin, point):
    X1, X2 = grushin.fields
    np.testing.assert_allclose(systems.lie_bracket(X1, X2, np.array(point)), [0.0, 1.0], atol=1e-6)


def test_bracket_antisymmetry(grushin, heisenberg):
    for system in (grushin, heisenberg):
        X1, X2 = system.fields
        x = np.full(system.dimension, 0.4)
        total = systems.lie_bracket(X1, X2, x) + systems.lie_bracket(X2, X1, x)
        assert np.max(np.abs(total)) <= 1e-8
        np.testing.assert_allclose(systems.lie_bracket(X1, X1, x), 0.0, atol=1e-8)


def test_bracket_second_order_in_h():
    cubic = systems.grushin("x^3")
    X1, X2 = cubic.fields
    x = np.array([0.7, 0.0])
    exact = cubic.exact_brackets[(0, 1)](x)
    coarse = np.linalg.norm(systems.lie_bracket(X1, X2, x, h=1e-2) - exact)
    fine = np.linalg.norm(systems.lie_bracket(X1, X2, x, h=5e-3) - exact)
    assert coarse / fine == pytest.approx(4.0, rel=0.1)


def test_bracket_rejects_nonpositive_step(grushin):
    X1, X2 = grushin.fields
    with pytest.raises(InputError):
        systems.lie_bracket(X1, X2, np.zeros(2), h=0.0)


def test_chow_degrees(heisenberg, grushin):
    report = systems.check_chow(heisenberg, np.array([0.3, -1.0, 2.0]))
    assert report.holds and report.degree == 2
    assert report.basis_ranks == [2, 3]

    on_axis = systems.check_chow(grushin, np.array([0.0, 0.5]))
    assert on_axis.holds and on_axis.degree == 2

    off_axis = systems.check_chow(grushin, np.array([1.0, 0.5]))
    assert off_axis.holds and off_axis.degree == 1


def test_chow_fails_for_degenerate_field():
    flat = systems.grushin("0")
    report = systems.check_chow(flat, np.array([0.5, 0.0]))
    assert not report.holds
    assert report.basis_ranks[-1] == 1


def test_chow_needs_driftless_system():
    with pytest.raises(InputError):
        systems.check_chow(systems.double_integrator(), np.zeros(2))


def test_kalman():
    assert systems.kalman_controllable([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
    assert systems.kalman_controllable([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]])
    assert not systems.kalman_controllable(np.zeros((2, 2)), np.zeros((2, 1)))


def test_gramian_agrees_with_kalman():
    A, B = [[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]]
    gramian = systems.controllability_gramian(A, B, 1.0)
    # closed form for the double integrator
    np.testing.assert_allclose(gramian, [[1.0 / 3.0, 0.5], [0.5, 1.0]], atol=1e-8)
    assert systems.gramian_positive_definite(A, B)
    assert not systems.gramian_positive_definite([[0.0, 0.0], [0.0, 0.0]], [[0.0], [1.0]])


def test_minimum_energy_double_integrator():
    di = systems.double_integrator()
    # rest to rest over unit distance: 12 for T = 1
    assert systems.minimum_energy(di, [0.0, 0.0], [1.0, 0.0], 1.0) == pytest.approx(12.0, rel=1e-6)


def test_audit_constants(heisenberg, grushin):
    for system in (heisenberg, grushin):
        lower = [-2.0] * system.dimension
        upper = [2.0] * system.dimension
        report = systems.audit_constants(system, lower, upper, n_samples=500)
        assert report.passed
        assert report.linearity_error is not None and report.linearity_error <= 1e-12


def test_audit_constants_flags_small_constant():
    tight = systems.grushin("x", c_f=0.1)
    report = systems.audit_constants(tight, [-2.0, -2.0], [2.0, 2.0], n_samples=500)
    assert not report.passed
    assert not report.growth_ok


def test_harmonic_oscillator_rest_point():
    osc = systems.harmonic_oscillator(0.5)
    np.testing.assert_allclose(systems.eval_dynamics(osc, [0.5, 0.0], osc.u_star), [0.0, 0.0], atol=1e-15)


def test_get_system_registry():
    assert systems.get_system("grushin", phi="x^2").dimension == 2
    with pytest.raises(InputError):
        systems.get_system("lorenz")


def test_driftless_requires_zero_u_star():
    with pytest.raises(InputError):
        systems.ControlSystemSpec(name="bad", dimension=2, control_dimension=2, kind="driftless_affine",
                                  fields=systems.euclidean(2).fields, u_star=[1.0, 0.0])


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_benchmark_anchor_matches_system(name):
    anchor = BENCHMARKS[name].anchor
    system = systems.system_from_config(parse_config(benchmark_config(name, "validate")).system)
    kind = anchor.split(",")[0]
    if kind == "driftless":
        step = int(anchor.split("step ")[1][0])
        assert systems.check_chow(system, np.zeros(system.dimension)).degree == step
    else:
        assert kind == "linear"
        assert systems.kalman_controllable(system.A, system.B)
