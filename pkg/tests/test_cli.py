import json
import subprocess
import sys

import numpy as np
import pytest

from stacklqg.cli import main
from stacklqg.io import dump_scenario, load_scenario, read_matrix_path_csv
from stacklqg.problem import build_example_debt, fixture_scalar


def run(*args):
    return main([str(a) for a in args])


@pytest.mark.parametrize("scenario", ["debt", "scalar", "det", "servo"])
def test_validate_builtins(scenario, capsys):
    assert run("validate", scenario) == 0
    assert "satisfied" in capsys.readouterr().out


def test_validate_failure(tmp_path):
    path = tmp_path / "bad.yaml"
    dump_scenario(fixture_scalar(R_FF=[[0.0]]), path)
    assert run("validate", path) == 3


def test_validate_malformed(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("dims: {n: 1}\nhorizon: 1\n")
    assert run("validate", path) == 2
    assert "matrices" in capsys.readouterr().err


def test_solve_scalar(tmp_path):
    out = tmp_path / "s"
    assert run("solve", "scalar", "--steps", 200, "--out", out) == 0
    assert len((out / "P.csv").read_text().splitlines()) == 201 + 1
    fp = json.loads((out / "fixed_point.json").read_text())
    assert fp["converged"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["N"] == 200 and man["command"] == "solve" and "version" in man
    assert (out / "gains" / "K_F.csv").exists()
    assert load_scenario(out / "scenario.yaml").equals(fixture_scalar())


def test_solve_debt_converges(tmp_path):
    assert run("solve", "debt", "--steps", 500, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "fixed_point.json").read_text())["converged"]


def test_solve_too_coarse(tmp_path):
    assert run("solve", "scalar", "--steps", 1, "--out", tmp_path) == 2


def test_solve_fixed_point_failure(tmp_path):
    # damping so small that 200 sweeps cannot reach the tolerance
    assert run("solve", "debt", "--steps", 100, "--damping", 1e-4, "--out", tmp_path) == 4


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("simulate", "scalar", "--steps", 100, "--paths", 1, "--seed", 4,
                   "--trajectories", 1, "--out", out) == 0
    ra = json.loads((a / "cost_report.json").read_text())
    rb = json.loads((b / "cost_report.json").read_text())
    assert ra == rb and ra["J_F_se"] is None
    assert (a / "trajectory_0000.csv").read_text() == (b / "trajectory_0000.csv").read_text()


def test_simulate_zero_paths(tmp_path):
    assert run("simulate", "scalar", "--paths", 0, "--out", tmp_path) == 2


def test_simulate_debt_report(tmp_path):
    assert run("simulate", "debt", "--steps", 200, "--paths", 1000, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "cost_report.json").read_text())
    assert np.isfinite(rep["J_F_se"]) and np.isfinite(rep["J_L_se"])
    assert (tmp_path / "diagnostics.json").exists()


@pytest.mark.parametrize("threads", ["1", "2", "8"])
def test_simulate_threads_bit_exact(tmp_path, threads, monkeypatch):
    monkeypatch.setenv("STACKLQG_THREADS", threads)
    assert run("simulate", "scalar", "--steps", 100, "--paths", 600, "--seed", 3, "--bit-exact",
               "--out", tmp_path / threads) == 0
    ref = tmp_path / "ref"
    if not ref.exists():
        monkeypatch.setenv("STACKLQG_THREADS", "1")
        run("simulate", "scalar", "--steps", 100, "--paths", 600, "--seed", 3, "--bit-exact", "--out", ref)
    for name in ("cost_report.json", "diagnostics.json"):
        assert (tmp_path / threads / name).read_bytes() == (ref / name).read_bytes()


@pytest.mark.parametrize("scenario", ["scalar", "det"])
def test_verify_fast_passes(tmp_path, scenario):
    assert run("verify", scenario, "--steps", 1000, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "verification.json").read_text())
    assert rep["passed"] and any(c["name"] == "tpbvp_J_L" for c in rep["checks"])


def test_verify_tampered(tmp_path):
    assert run("verify", "scalar", "--steps", 400, "--tamper-P", 1.01, "--out", tmp_path) == 6
    rep = json.loads((tmp_path / "verification.json").read_text())
    failed = {c["name"] for c in rep["checks"] if not c["passed"]}
    assert "inner_layer" in failed


@pytest.mark.slow
def test_verify_full(tmp_path):
    assert run("verify", "scalar", "--steps", 1000, "--paths", 1000, "--level", "full", "--out", tmp_path) == 0


def test_example_debt(tmp_path):
    assert run("example", "debt", "--steps", 200, "--out", tmp_path) == 0
    assert load_scenario(tmp_path / "scenario.yaml").equals(build_example_debt())


def test_example_servo_params(tmp_path):
    assert run("example", "servo", "--steps", 200, "--param", "theta=0.5", "--param", "T=2.0",
               "--out", tmp_path) == 0
    spec = load_scenario(tmp_path / "scenario.yaml")
    np.testing.assert_array_equal(spec.R_LF, [[0.5]])
    np.testing.assert_array_equal(spec.R_LL, [[0.5]])
    assert spec.T == 2.0


@pytest.mark.parametrize("args", [["example", "bogus"], ["example", "servo", "--param", "theta=2"],
                                  ["example", "debt", "--param", "nokey"],
                                  ["example", "debt", "--param", "zeta=1"],
                                  ["example", "servo", "--param", "h1=[[1, 0, 0]]"]])
def test_example_errors(tmp_path, args):
    code = None
    try:
        code = run(*args, "--out", tmp_path)
    except SystemExit as exc:
        code = exc.code
    assert code == 2


def test_unknown_scenario(tmp_path):
    assert run("solve", "nowhere.yaml", "--out", tmp_path) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "stacklqg.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "stacklqg" in res.stdout
