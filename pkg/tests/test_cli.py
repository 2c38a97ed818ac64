import csv
import json

import numpy as np
import pytest

from smpc.cli import main, update_rho
from smpc.config import load_config
from smpc.solver import load_program, solve

TOY_WITH_PLOTS = """\
system: {case: toy}
constraints:
  inputs: [{name: u, lower: -1, upper: 1}]
  states: [{name: x, lower: -10, upper: 10}]
controller:
  horizon: 3
  sampling_period_min: 6
  Q_diag: [1]
  R_diag: [10]
  rho: 1000   # calibrated
  chance: {alpha: 0.1, delta: [5, 5]}
  solver: {backend: clarabel, tol: 1.0e-10}
setpoints:
  tracked: [x]
  schedule:
    - {start_hr: 0, values: [0]}
    - {start_hr: 1, values: [0.5]}
experiment: {runs: 4, duration_hr: 2, seed: 3, snapshot_times_hr: [0.5, 1.5]}
output: {directory: out, plots: true}
"""


def test_verify_toy(capsys, tmp_path):
    assert main(["verify", "--config", "toy", "--out", str(tmp_path / "v.json")]) == 0
    rep = json.loads((tmp_path / "v.json").read_text())
    assert rep["passed"] and set(rep["suites"]) >= {"moments", "input_duality", "softened_feasibility"}


def test_verify_reports_unstable_plant(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("[matrix A 1 1]\n1.5\n[matrix B 1 1]\n1\n[matrix G 1 1]\n1\n[matrix Sigma_w 1 1]\n1\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(TOY_WITH_PLOTS.replace("{case: toy}", "{file: p.txt}").replace("name: u", "name: u1")
                   .replace("name: x", "name: x1").replace("tracked: [x]", "tracked: [x1]"))
    assert main(["verify", "--config", str(cfg)]) == 1
    rep = json.loads(capsys.readouterr().out)
    assert not rep["suites"]["lyapunov"]["passed"]


def test_simulate_writes_artifacts(tmp_path, capsys):
    cfg = tmp_path / "toy.yaml"
    cfg.write_text(TOY_WITH_PLOTS)
    out = tmp_path / "res"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["constrained_histograms.svg", "summary.json", "timing.txt", "traces", "tracked_states.svg"]
    rows = list(csv.reader((out / "traces" / "run_000.csv").open()))
    assert rows[0] == ["step", "time_hr", "x:x", "u:u", "slack_mean", "slack_var", "status", "solver_iterations"]
    assert len(rows) == 1 + 21
    s = json.loads((out / "summary.json").read_text())
    assert s["schema_version"] == 1 and s["runs"] == 4
    assert s["inputs"]["bound_violations"] == 0
    assert "runs with state violations: 0" in capsys.readouterr().out


def test_simulate_overrides(tmp_path):
    out = tmp_path / "r"
    assert main(["simulate", "--config", "toy", "--runs", "2", "--seed", "5", "--controller", "nominal",
                 "--out", str(out), "--no-plots"]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["runs"] == 2 and s["seed"] == 5 and s["controller"] == "nominal"


def test_export_round_trip(tmp_path, capsys):
    path = tmp_path / "p.conic"
    assert main(["export-socp", "--config", "toy", "--out", str(path), "--state", "3"]) == 0
    prog = load_program(path)
    sol = solve(prog)
    assert sol.status == "optimal"
    assert "v" in prog.var_blocks and "eps_var" in prog.var_blocks


def test_calibrate_and_write_config(tmp_path, capsys):
    new = tmp_path / "cal.yaml"
    assert main(["calibrate", "--config", "toy", "--grid", "0.01,1,10,100", "--probes", "8",
                 "--write-config", str(new)]) == 0
    out = capsys.readouterr().out
    assert "selected rho*" in out
    rho = load_config(new).controller.weights.rho
    assert rho in (1.0, 10.0, 100.0)


def test_calibrate_failure_exit_code(capsys):
    assert main(["calibrate", "--config", "toy", "--grid", "0.001", "--probes", "8"]) == 1
    assert "no rho qualified" in capsys.readouterr().out


def test_update_rho_keeps_comment():
    text = update_rho(TOY_WITH_PLOTS, 250.0)
    assert "  rho: 250.0  # calibrated\n" in text
    with pytest.raises(ValueError):
        update_rho("system: {case: toy}\n", 1.0)


@pytest.mark.parametrize("argv", [["simulate", "--config", "missing.yaml"], ["verify", "--config", "nosuch"]])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_bad_cli_values(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--config", "toy", "--runs", "0"])
    assert exc.value.code == 2
    assert main(["export-socp", "--config", "toy", "--state", "1,2"]) == 2
