import json
import math
import subprocess
import sys

import numpy as np
import pytest

from todadeg import cli
from todadeg.cli import RunConfig
from todadeg.errors import CriticalParameter, InvalidArgument

H_PERT = {"const": 1.0, "terms": [{"coef": 0.3, "x": "cos", "kx": 1, "y": "cos", "ky": 0}]}
H_BRANCH = {"const": 1.0, "terms": [{"coef": 0.5, "x": "cos", "kx": 1, "y": "cos", "ky": 1},
                                    {"coef": 0.1, "x": "cos", "kx": 1, "y": "cos", "ky": 0}]}


def run_main(tmp_path, cfg: dict, *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return cli.main(["--config", str(path), "--quiet", *extra])


def read_csv(path):
    return path.read_text().splitlines()


# -- config ---------------------------------------------------------------------------

def test_config_round_trip_is_idempotent():
    text = json.dumps({"command": "solve-toda", "grid": 32, "params": {"rho1": "2", "rho2": "9/2"},
                       "weights": {"h1": H_PERT}, "seed": 3})
    once = RunConfig.from_json(text).to_json()
    assert RunConfig.from_json(once).to_json() == once


@pytest.mark.parametrize("bad", [
    {"command": "nope"},
    {"command": "degree", "params": {"chi": 2}, "grid": 100},
    {"command": "degree", "params": {"chi": 2}, "grid": 2048},
    {"command": "degree", "params": {"chi": 2}, "extra": 1},
    {"command": "degree"},
    {"command": "solve-mf", "params": {"rho": 1.5}},
    {"command": "continue", "params": {"path": [["2", "2"]]}},
])
def test_config_validation_errors(bad):
    with pytest.raises(InvalidArgument):
        RunConfig.from_dict(bad)


@pytest.mark.parametrize("cfg", [
    {"command": "solve-mf", "params": {"rho": "8"}},
    {"command": "solve-toda", "params": {"rho1": "4", "rho2": "2"}},
    {"command": "solve-shadow", "params": {"rho2": "4"}},
    {"command": "degree", "params": {"chi": 0, "rho": "16"}},
])
def test_critical_parameters_refused_before_compute(cfg):
    with pytest.raises(CriticalParameter):
        RunConfig.from_dict(cfg)


def test_pi_values_are_rational():
    assert cli.pi_value("9/2") == pytest.approx(4.5 * math.pi)
    assert cli.pi_value(4) == pytest.approx(4 * math.pi)
    with pytest.raises(InvalidArgument):
        cli.pi_value(4.5)


# -- commands --------------------------------------------------------------------------

def test_degree_table(tmp_path):
    out = tmp_path / "o"
    code = run_main(tmp_path, {"command": "degree", "params": {"chi": 2, "rho1_window": "(4pi,8pi)", "k": [0, 1, 2, 3],
                                                               "expect": [-1, -1, 2, 0]}, "out": str(out)})
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["results"]["toda_degree"] == [-1, -1, 2, 0]
    assert read_csv(out / "degrees.csv") == ["k,d", "0,-1", "1,-1", "2,2", "3,0"]
    assert report["manifest"] == ["degrees.csv"]


def test_mean_field_degree(tmp_path):
    out = tmp_path / "o"
    assert run_main(tmp_path, {"command": "degree", "params": {"chi": 0, "alphas": [1, 1, 1], "rho": "12"}, "out": str(out)}) == 0
    assert json.loads((out / "report.json").read_text())["results"]["mean_field_degree"] == 4


def test_failed_check_gives_exit_one(tmp_path):
    cfg = {"command": "degree", "params": {"chi": 2, "rho1_window": "(4pi,8pi)", "expect": [0, 0, 0, 0]}, "out": str(tmp_path / "o")}
    assert run_main(tmp_path, cfg) == 1


def test_solve_mf_flat_weight_gives_zeros(tmp_path):
    out = tmp_path / "o"
    assert run_main(tmp_path, {"command": "solve-mf", "grid": 32, "params": {"rho": "1", "tol": 1e-12}, "out": str(out)}) == 0
    lines = read_csv(out / "u.csv")
    values = np.array([[float(v) for v in line.split(",")] for line in lines if not line.startswith("#")])
    assert np.max(np.abs(values)) <= 1e-12
    assert json.loads((out / "report.json").read_text())["results"]["residual"] <= 1e-12


def test_green_check_small_grids(tmp_path):
    out = tmp_path / "o"
    code = run_main(tmp_path, {"command": "green-check", "params": {"grids": [64, 128]}, "out": str(out)})
    report = json.loads((out / "report.json").read_text())
    assert report["checks"]["mean_zero"]
    assert read_csv(out / "green.csv")[0] == "n,integral,far_error"
    assert code == (0 if report["passed"] else 1)


def test_continue_writes_branch_csv(tmp_path):
    out = tmp_path / "o"
    cfg = {"command": "continue", "grid": 32, "params": {"path": [["2", "2"], ["3", "2"]]}, "out": str(out)}
    assert run_main(tmp_path, cfg) == 0
    lines = read_csv(out / "branch.csv")
    assert lines[0] == "rho1,max_v1,concentration"
    assert float(lines[-1].split(",")[0]) == pytest.approx(3 * math.pi)


def test_toda_runs_are_byte_identical(tmp_path):
    cfg = {"command": "solve-toda", "grid": 32, "params": {"rho1": "2", "rho2": "3", "noise": 0.01},
           "weights": {"h1": H_PERT}, "seed": 7}
    outs = []
    for name in ("a", "b"):
        cfg["out"] = str(tmp_path / name)
        assert run_main(tmp_path, cfg) == 0
        outs.append((tmp_path / name / "v1.csv").read_bytes() + (tmp_path / name / "v2.csv").read_bytes())
    assert outs[0] == outs[1]


def test_continuation_runs_are_byte_identical(tmp_path):
    cfg = {"command": "continue", "grid": 32, "params": {"path": [["2", "2"], ["7/2", "2"]]}, "weights": {"h1": H_BRANCH}}
    outs = []
    for name in ("a", "b"):
        cfg["out"] = str(tmp_path / name)
        assert run_main(tmp_path, cfg) == 0
        outs.append((tmp_path / name / "branch_full.csv").read_bytes())
    assert outs[0] == outs[1]


# -- exit codes and machine-readable errors ---------------------------------------------

def test_validation_exit_code_and_json_error(tmp_path, capsys):
    code = run_main(tmp_path, {"command": "solve-shadow", "params": {"rho2": "4"}})
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"] == "CriticalParameter"


def test_malformed_json_exit_code(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    assert cli.main(["--config", str(path), "--quiet"]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["exit_code"] == 2


def test_divergence_exit_code(tmp_path, capsys):
    cfg = {"command": "solve-toda", "grid": 16, "params": {"rho1": "2", "rho2": "3", "tol": 1e-30},
           "weights": {"h1": H_PERT}, "out": str(tmp_path / "o")}
    assert run_main(tmp_path, cfg) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 3 and "newton" in err


def test_resolution_exit_code(tmp_path, capsys):
    cfg = {"command": "bubble-check", "grid": 64, "params": {"lambdas": [10, 18]}}
    assert run_main(tmp_path, cfg) == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ResolutionError"


def test_flags_override_config(tmp_path):
    out = tmp_path / "flagged"
    code = run_main(tmp_path, {"command": "solve-mf", "params": {"rho": "1"}}, "--grid", "16", "--out", str(out), "--seed", "5")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["grid"] == 16 and report["config"]["seed"] == 5


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"command": "degree", "params": {"chi": 0, "rho1_window": "(4pi,8pi)", "k": [1]},
                               "out": str(tmp_path / "o")}))
    proc = subprocess.run([sys.executable, "-m", "todadeg", "--config", str(cfg)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"]["toda_degree"] == [1]
