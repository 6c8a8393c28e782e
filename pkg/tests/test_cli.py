import csv
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from fadetrack import cli, filtering
from fadetrack.sim import engine

FAST = ["--override", "runs=2", "--override", "duration_steps=12", "--override", "steady_window_steps=4",
        "--override", "network.n_nodes=6", "--override", "network.comm_range_m=900"]


def read_csv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_simulate_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["simulate", "--out", str(out)] + FAST) == 0
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, cli.summary_schema())
    assert summary["master_seed"] == summary["config"]["master_seed"]
    assert set(summary["variants"]) == {"Fc", "eFc", "nFc"}
    rows = read_csv(out / "rmse_position.csv")
    assert len(rows) == 13 and list(rows[0]) == ["step", "Fc", "eFc", "nFc"]
    traj = read_csv(out / "trajectory.csv")
    assert len(traj) == 13 and "truth_x" in traj[0] and "Fc_z" in traj[0]
    assert sorted(p.name for p in (out / "telemetry").iterdir()) == ["run_0.csv", "run_1.csv"]
    head = (out / "rmse_velocity.csv").read_text().splitlines()[:3]
    assert head[1] == f"# master_seed={summary['master_seed']}"
    assert json.loads(head[2].split("=", 1)[1]) == summary["config"]


def test_replay_is_byte_identical(tmp_path):
    args = FAST + ["--override", "runs=1", "--override", "master_seed=7"]
    assert cli.main(["simulate", "--out", str(tmp_path / "a")] + args) == 0
    assert cli.main(["simulate", "--out", str(tmp_path / "b")] + args) == 0
    for name in ["summary.json", "rmse_position.csv", "rmse_velocity.csv", "trajectory.csv", "telemetry/run_0.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_embedded_config_reproduces(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path / "a")] + FAST) == 0
    cfg = json.loads((tmp_path / "a" / "summary.json").read_text())["config"]
    scen = tmp_path / "replay.json"
    scen.write_text(json.dumps(cfg))
    assert cli.main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "rmse_position.csv").read_bytes() == (tmp_path / "b" / "rmse_position.csv").read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_worker_flag_does_not_change_bytes(tmp_path):
    assert cli.main(["compare", "--out", str(tmp_path / "a"), "--workers", "1"] + FAST) == 0
    assert cli.main(["compare", "--out", str(tmp_path / "b"), "--workers", "2"] + FAST) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_config_error_exit_and_no_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    assert cli.main(["simulate", "--out", str(out), "--override", "network.comm_range_m=-5"]) == 2
    assert not out.exists()
    assert "comm_range_m" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert cli.main(["simulate", "--scenario", str(bad), "--out", str(out)]) == 2
    assert cli.main(["compare", "--out", str(out), "--override", 'filter.variants=["Fc"]']) == 2
    assert not out.exists()


def test_compare_collapses_without_estimation_error(tmp_path):
    args = FAST + ["--override", "fading.sigma_eps=1e-12", "--override", "fading.delta_eps=1e-12",
                   "--override", 'filter.variants=["Fc","eFc"]']
    assert cli.main(["compare", "--out", str(tmp_path)] + args) == 0
    rows = read_csv(tmp_path / "rmse_position.csv")
    fc = np.array([float(r["Fc"]) for r in rows])
    efc = np.array([float(r["eFc"]) for r in rows])
    np.testing.assert_allclose(fc, efc, rtol=1e-9)


def test_json_format(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--format", "json"] + FAST) == 0
    assert not (tmp_path / "rmse_position.csv").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["series"]["Fc"]["rmse_position_m"]) == 13


def test_sweep_single_level(tmp_path):
    args = FAST + ["--override", "sweep.levels=[0.5]", "--override", "sweep.power_mw=[140]",
                   "--override", 'filter.variants=["Fc"]']
    assert cli.main(["sweep", "--out", str(tmp_path)] + args) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 1
    assert float(rows[0]["change_rmse_position"]) == 0.0 and float(rows[0]["change_energy"]) == 0.0
    jsonschema.validate(json.loads((tmp_path / "summary.json").read_text()), cli.summary_schema())


def test_sweep_energy_rates(tmp_path):
    args = FAST + ["--override", 'filter.variants=["Fc"]', "--override", "runs=1"]
    assert cli.main(["sweep", "--out", str(tmp_path)] + args) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    rates = [float(r["change_energy"]) for r in rows]
    assert rates == [u / 400 - 1 for u in (93.0, 118.0, 140.0, 168.0, 400.0)]


def test_power_map(tmp_path):
    assert cli.main(["power-map", "--out", str(tmp_path), "--points", "41"]) == 0
    rows = read_csv(tmp_path / "power_map.csv")
    q = np.array([float(r["q"]) for r in rows])
    assert float(rows[0]["u_mw"]) == 0.0
    assert q[0] == pytest.approx(0.5**1000, rel=1e-12)
    unsat = q < 1.0
    assert np.all(np.diff(q[unsat]) > 0)
    assert q[-1] == pytest.approx(1.0)


def test_verify_passes(tmp_path, capsys):
    assert cli.main(["verify", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["passed"]
    names = {p["name"] for p in report["properties"]}
    assert {"if_gain_equivalence", "sigma_point_linear_exactness", "moment_quadrature", "covariance_symmetry"} <= names
    diag = next(p for p in report["properties"] if p["name"] == "covariance_positivity")
    assert "threshold" in diag["detail"]["stability"]


def test_verify_detects_asymmetry(tmp_path, monkeypatch):
    # corrupt symmetrization: a tiny one-sided perturbation
    def broken(P):
        Q = np.array(P, dtype=float, copy=True)
        if Q.shape[-1] > 1:
            Q[..., 0, 1] += 1e-9 * np.abs(Q[..., 0, 1]) + 1e-12
        return Q

    monkeypatch.setattr(filtering, "_symmetrize", broken)
    assert cli.main(["verify", "--out", str(tmp_path)]) == 4
    report = json.loads((tmp_path / "verify_report.json").read_text())
    sym = next(p for p in report["properties"] if p["name"] == "covariance_symmetry")
    assert not sym["passed"]


def test_skipping_symmetrization_stays_symmetric(monkeypatch):
    from fadetrack import verify
    from fadetrack.sim.config import load_scenario

    monkeypatch.setattr(filtering, "_symmetrize", lambda P: P)
    world = engine.build_world(load_scenario())
    assert verify.check_covariance_symmetry(world.model, world.x_hat0, world.P0).passed


def test_experiment_failure_exit(tmp_path, monkeypatch):
    def always_fail(*args):
        raise filtering.SingularCovariance("injected", node=1)

    monkeypatch.setattr(engine, "filter_step", always_fail)
    assert cli.main(["simulate", "--out", str(tmp_path)] + FAST) == 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["failures"]) == 6 and summary["failures"][0]["node"] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fadetrack.cli", "power-map", "--out", str(tmp_path), "--points", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "power_map.csv").exists()
