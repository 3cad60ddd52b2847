import json

import pytest

from app import cli
from app.utils.field_io import read_summary


def _config(tmp_path, task="ergodic-estimate", **overrides):
    data = {
        "schema_version": 1,
        "task": task,
        "system": {"kind": "grushin", "phi": "x"},
        "lagrangian": {"kind": "generic", "L": "1"},
        "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 9},
        "solver": {"dt": 0.1, "control_points": 5},
        "params": {"T_list": [1.0, 2.0], "lambda_list": [1.0, 0.5], "R": 1.0},
    }
    data.update(overrides)
    path = tmp_path / f"{task}.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_list_benchmarks(capsys):
    assert cli.main(["list-benchmarks"]) == 0
    out = capsys.readouterr().out
    for name in ("double-integrator", "harmonic-oscillator", "heisenberg-quadratic", "grushin-quadratic"):
        assert name in out


def test_ergodic_estimate_of_constant_cost(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["ergodic-estimate", "--config", _config(tmp_path), "--out", str(out)])
    assert code == 0
    summary = read_summary(out / "summary.txt")
    assert float(summary["mane"]) == pytest.approx(1.0, abs=1e-9)
    assert float(summary["mane_closed_form"]) == pytest.approx(1.0, abs=1e-9)
    assert summary["assert_tauberian"] == "true"
    assert summary["tolerance_mane_convergence"] == "0.15"
    assert (out / "mane_estimates.csv").exists() and (out / "tauberian.csv").exists()
    assert "status=passed" in capsys.readouterr().out


def test_flags_override_config(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["ergodic-estimate", "--config", _config(tmp_path), "--T-list", "0.5", "--lambda-list", "1",
                     "--out", str(out)])
    assert code == 0
    summary = read_summary(out / "summary.txt")
    assert "horizon_T0.5_sup" in summary
    assert "tauberian_gap" not in summary


def test_runs_are_deterministic(tmp_path):
    config = _config(tmp_path)
    for name in ("a", "b"):
        assert cli.main(["ergodic-estimate", "--config", config, "--out", str(tmp_path / name)]) == 0
    for artifact in ("mane_estimates.csv", "tauberian.csv", "summary.txt"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_dry_run_solves_nothing(tmp_path, capsys):
    out = tmp_path / "never"
    assert cli.main(["ergodic-estimate", "--config", _config(tmp_path), "--out", str(out), "--dry-run"]) == 0
    printed = capsys.readouterr().out
    assert "dt=0.1" in printed
    assert "time_steps=20" in printed
    assert not out.exists()


def test_probes_flag(tmp_path, capsys):
    config = _config(tmp_path)
    assert cli.main(["ergodic-estimate", "--config", config, "--probes", "0,0;1,0.5", "--dry-run",
                     "--out", str(tmp_path / "never")]) == 0
    assert "probes=2" in capsys.readouterr().out

    out = tmp_path / "run"
    assert cli.main(["ergodic-estimate", "--config", config, "--probes", "0.5,-0.5", "--out", str(out)]) == 0
    summary = read_summary(out / "summary.txt")
    assert summary["n_probes"] == "1"
    assert float(summary["mane"]) == pytest.approx(1.0, abs=1e-9)


def test_probes_of_wrong_dimension(tmp_path):
    code = cli.main(["ergodic-estimate", "--config", _config(tmp_path), "--probes", "0,0,0",
                     "--out", str(tmp_path / "run")])
    assert code == 2


def test_validate_reports_bracket_convention(tmp_path):
    out = tmp_path / "run"
    config = _config(tmp_path, task="validate", params={"n_samples": 200, "R": 1.0})
    cli.main(["validate", "--config", config, "--out", str(out)])
    summary = read_summary(out / "summary.txt")
    assert summary["bracket_convention"] == "[X,Y] = DY X - DX Y"
    bracket = [float(v) for v in summary["bracket_f1_f2"].split()]
    assert bracket == pytest.approx([0.0, 1.0], abs=1e-6)
    assert summary["chow_degree_max"] in ("1", "2")


def test_corrector_reports_residual_order_and_moduli(tmp_path):
    out = tmp_path / "run"
    config = _config(tmp_path, task="corrector", tolerances={"residual_order": 0.3})
    assert cli.main(["corrector", "--config", config, "--out", str(out)]) == 0
    summary = read_summary(out / "summary.txt")
    assert float(summary["residual_chi_bar"]) == 0.0
    assert float(summary["residual_chi_bar_half_dt"]) == 0.0
    assert "residual_order_ratio" not in summary
    assert summary["assert_residual_order"] == "true"
    assert summary["tolerance_residual_order"] == "0.3"
    assert float(summary["equicontinuity_modulus"]) == 0.0
    lines = (out / "fixed_point_moduli.csv").read_text().splitlines()
    assert lines[0] == "time,modulus"
    assert lines[1] == "0.0,0.0"


def test_two_node_grid_is_invalid_input(tmp_path):
    config = _config(tmp_path, grid={"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 2})
    assert cli.main(["ergodic-estimate", "--config", config, "--out", str(tmp_path / "run")]) == 2


def test_grid_task_without_grid(tmp_path):
    config = _config(tmp_path, grid=None)
    assert cli.main(["solve-vt", "--config", config, "--out", str(tmp_path / "run")]) == 2


def test_unknown_benchmark(tmp_path):
    assert cli.main(["validate", "--benchmark", "lorenz", "--out", str(tmp_path)]) == 2


def test_missing_endpoints_reported_in_summary(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["sr-distance", "--benchmark", "grushin-quadratic", "--out", str(out)]) == 2
    summary = read_summary(out / "summary.txt")
    assert summary["status"] == "error"
    assert summary["exit_code"] == "2"


def test_lax_oleinik_laws(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["lax-oleinik", "--config", _config(tmp_path, task="lax-oleinik"), "--t", "0.4",
                     "--out", str(out)])
    assert code == 0
    summary = read_summary(out / "summary.txt")
    assert summary["assert_semigroup"] == "true"
    assert summary["assert_constant_shift"] == "true"
    assert float(summary["T_t_phi_max"]) == pytest.approx(0.4)
    assert (out / "T_t_phi.bin").exists()


def test_inline_system_and_lagrangian(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["solve-vt", "--system", "euclidean", "--lagrangian", '{"kind": "generic", "L": "1"}',
                     "--grid", '{"lower": [-1, -1], "upper": [1, 1], "nodes": 5}', "--T", "0.5",
                     "--out", str(out)])
    assert code == 0
    summary = read_summary(out / "summary.txt")
    assert float(summary["V_T_min"]) == pytest.approx(0.5)
    assert (out / "V_T.csv").exists()


def test_inline_system_needs_lagrangian(tmp_path):
    assert cli.main(["validate", "--system", "heisenberg", "--out", str(tmp_path)]) == 2


def test_sr_distance_on_the_plane(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["sr-distance", "--benchmark", "euclidean-sanity", "--restarts", "2", "--out", str(out)])
    assert code == 0
    summary = read_summary(out / "summary.txt")
    assert float(summary["distance"]) == pytest.approx(5.0, rel=0.01)
    assert summary["assert_euclidean_distance"] == "true"
    header = (out / "geodesic.csv").read_text().splitlines()[0]
    assert header == "t,x_1,x_2,u_1,u_2,running_cost"


@pytest.mark.slow
def test_validate_heisenberg_benchmark(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["validate", "--benchmark", "heisenberg-quadratic", "--out", str(out)]) == 0
    summary = read_summary(out / "summary.txt")
    assert summary["assert_chow"] == "true"
    assert summary["chow_degree_max"] == "2"
    assert summary["bracket_convention"] == "[X,Y] = DY X - DX Y"
    bracket = [float(v) for v in summary["bracket_f1_f2"].split()]
    assert bracket == pytest.approx([0.0, 0.0, -2.0], abs=1e-6)
    assert (out / "assumptions.csv").exists()


@pytest.mark.slow
def test_validate_double_integrator_uses_kalman(tmp_path):
    out = tmp_path / "run"
    cli.main(["validate", "--benchmark", "double-integrator", "--out", str(out)])
    summary = read_summary(out / "summary.txt")
    assert summary["kalman"] == "true"
    assert float(summary["lugc_C_R"]) > 0.0
