"""Command-line interface: config grammar, CSV contract, exit codes, and
end-to-end subcommand runs at tiny problem sizes."""

import csv
import io
import subprocess
import sys

import numpy as np
import pytest

import fbsde_llr.cli as cli
from fbsde_llr.cli import (CSV_HEADER, PLOT_HEADER, emit_csv, main,
                           parse_config, serialize_config)
from fbsde_llr.config import SolverConfig
from fbsde_llr.errors import ConfigError
from fbsde_llr.forward import read_level_dump, restore_level, simulate_paths
from fbsde_llr.harness import ReproduceChecks, ReproducePlan, SweepPlan


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_parse_config_defaults():
    cfg = parse_config(None)
    assert cfg.solver == SolverConfig()
    assert cfg.problem_name is None
    assert cfg.seeds_per_cell == 5


def test_parse_config_full_file(tmp_path):
    text = """\
# benchmark configuration
problem = allen_cahn_dw
d = 10
T = 0.3
N = 100            # steps
M = 20
seed = 9
kernel = epanechnikov
bandwidth_rule = fixed
bandwidth_c = 1.5
ridge_lambda = 1e-6
cg_tol = 1e-9
cg_maxiter = 77
newton_tol = 1e-11
newton_maxiter = 40
memory_budget_mb = 512
sweep_N = 50, 100
sweep_M = 20,40
seeds_per_cell = 3
"""
    path = tmp_path / "run.cfg"
    path.write_text(text)
    cfg = parse_config(path)
    assert cfg.problem_name == "allen_cahn_dw"
    assert cfg.dim == 10
    assert cfg.horizon == 0.3
    s = cfg.solver
    assert (s.n_steps, s.n_particles, s.seed) == (100, 20, 9)
    assert s.kernel == "epanechnikov"
    assert s.bandwidth_rule == "fixed"
    assert s.bandwidth_c == 1.5
    assert s.ridge_lambda == 1e-6
    assert s.cg_tol == 1e-9
    assert s.cg_maxiter == 77
    assert s.newton_tol == 1e-11
    assert s.newton_maxiter == 40
    assert s.memory_budget_mb == 512
    assert cfg.sweep_n == [50, 100]
    assert cfg.sweep_m == [20, 40]
    assert cfg.seeds_per_cell == 3


def test_parse_config_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("problem = linear_heat\nd = 2\nwat = 3\n")
    with pytest.raises(ConfigError, match=r"unknown config key 'wat' at "
                                          r"line 3"):
        parse_config(path)


def test_parse_config_malformed_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("problem linear_heat\n")
    with pytest.raises(ConfigError, match=r"expected 'key = value' at "
                                          r"line 1"):
        parse_config(path)


def test_parse_config_invalid_value(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("N = twelve\n")
    with pytest.raises(ConfigError, match=r"invalid value for key 'N'"):
        parse_config(path)
    path.write_text("sweep_N = ,\n")
    with pytest.raises(ConfigError, match="sweep_N"):
        parse_config(path)


def test_parse_config_missing_file():
    with pytest.raises(ConfigError, match="cannot read config file"):
        parse_config("/nonexistent/path.cfg")


def test_parse_config_last_value_wins(tmp_path):
    path = tmp_path / "dup.cfg"
    path.write_text("N = 10\nN = 20\n")
    assert parse_config(path).solver.n_steps == 20


def test_parse_config_overrides_win(tmp_path):
    path = tmp_path / "base.cfg"
    path.write_text("problem = linear_heat\nd = 2\nN = 10\nseed = 5\n")
    cfg = parse_config(path, overrides=["N=30", "M = 7"])
    assert cfg.solver.n_steps == 30
    assert cfg.solver.n_particles == 7
    cfg = parse_config(path, overrides=["seed=11"], seed=99)
    assert cfg.solver.seed == 99  # explicit seed beats overrides


def test_parse_config_override_errors():
    with pytest.raises(ConfigError, match=r"--set expects key=value"):
        parse_config(None, overrides=["N"])
    with pytest.raises(ConfigError, match=r"unknown config key 'x' in "
                                          r"--set #1"):
        parse_config(None, overrides=["x=1"])
    with pytest.raises(ConfigError,
                       match=r"invalid value for key 'ridge_lambda'"):
        parse_config(None, overrides=["ridge_lambda=sometimes"])


def test_parse_config_ridge_constraint():
    with pytest.raises(ConfigError, match=r"ridge required when M <= d\+1"):
        parse_config(None, overrides=["problem=linear_heat", "d=10", "M=5",
                                      "ridge_lambda=0"])


def test_parse_config_auto_values():
    cfg = parse_config(None, overrides=["ridge_lambda=auto",
                                        "cg_maxiter=auto"])
    assert cfg.solver.ridge_lambda == "auto"
    assert cfg.solver.cg_maxiter == "auto"


def test_config_round_trip(tmp_path):
    path = tmp_path / "rt.cfg"
    path.write_text("problem = burgers\nd = 12\nnu = 0.25\nN = 64\n"
                    "sweep_N = 16,32\nridge_lambda = auto\n")
    first = parse_config(path)
    text1 = serialize_config(first)
    path2 = tmp_path / "rt2.cfg"
    path2.write_text(text1)
    second = parse_config(path2)
    assert first == second
    assert serialize_config(second) == text1


# ---------------------------------------------------------------------------
# CSV contract
# ---------------------------------------------------------------------------

def test_emit_csv_header_and_formats(tmp_path):
    rows = [{"problem": "linear_heat", "d": 2, "T": 1.0, "N": 8, "M": 10,
             "seed": 1, "Y0": 0.1234567890123456789, "ref": None,
             "abs_err": None, "rel_err": None, "runtime_s": 0.5,
             "mean_cg_iters": 2.0, "mean_newton_iters": 0.0,
             "status": "ok"}]
    path = tmp_path / "r.csv"
    emit_csv(rows, path)
    raw = path.read_bytes()
    assert b"\r" not in raw  # LF line endings only
    text = raw.decode("utf-8")
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    fields = lines[1].split(",")
    assert fields[0] == "linear_heat"
    assert fields[7] == ""  # None -> empty
    assert float(fields[6]) == rows[0]["Y0"]  # 17 digits round-trip exactly


def test_emit_csv_empty_rows_writes_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    emit_csv([], path)
    assert path.read_text() == ",".join(CSV_HEADER) + "\n"


def test_emit_csv_rerun_is_byte_identical(tmp_path):
    rows = [{"problem": "x", "d": 1, "N": 2, "M": 3, "seed": 4,
             "Y0": 1.0 / 3.0, "status": "ok"}]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(rows, a)
    emit_csv(rows, b)
    assert a.read_bytes() == b.read_bytes()


def test_emit_csv_unwritable_path():
    with pytest.raises(ConfigError, match="cannot write CSV"):
        emit_csv([], "/nonexistent_dir_xyz/out.csv")


def run_main(argv, capsys):
    rc = main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# ---------------------------------------------------------------------------
# subcommand: run
# ---------------------------------------------------------------------------

HEAT_ARGS = ["--set", "problem=linear_heat", "--set", "d=2",
             "--set", "N=8", "--set", "M=20", "--set", "seed=1"]


def test_cmd_run_end_to_end(tmp_path, capsys):
    rc, out, _ = run_main(["run", *HEAT_ARGS,
                           "--output-dir", str(tmp_path)], capsys)
    assert rc == 0
    values = dict(line.split(" = ", 1) for line in out.splitlines()
                  if " = " in line)
    assert values["problem"] == "linear_heat"
    assert values["status"] == "ok"
    y0 = float(values["Y0"])
    # printed at 17 significant digits: must round-trip bitwise against a
    # fresh identical run
    from fbsde_llr.backward import run as run_solver
    from fbsde_llr.model import builtin_problem
    report = run_solver(builtin_problem("linear_heat", 2),
                        SolverConfig(n_steps=8, n_particles=20, seed=1))
    assert y0 == report.y0
    assert float(values["abs_err"]) == abs(report.y0 - float(values["ref"]))
    csv_path = tmp_path / "results.csv"
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["Y0"]) == report.y0
    assert rows[0]["status"] == "ok"


def test_cmd_run_dump_level(tmp_path, capsys):
    dump = tmp_path / "lvl.bin"
    rc, out, _ = run_main(["run", *HEAT_ARGS, "--dump-level", "3",
                           "--dump-out", str(dump)], capsys)
    assert rc == 0
    header, positions = read_level_dump(dump)
    assert header["level"] == 3
    assert header["n_particles"] == 20
    assert header["dim"] == 2
    assert header["seed"] == 1
    from fbsde_llr.model import builtin_problem
    store = simulate_paths(builtin_problem("linear_heat", 2),
                           SolverConfig(n_steps=8, n_particles=20, seed=1))
    np.testing.assert_array_equal(positions,
                                  restore_level(store, 3).positions)


def test_cmd_run_numerical_failure_exits_1(capsys):
    rc, _, err = run_main(
        ["run", "--set", "problem=allen_cahn_dw", "--set", "d=3",
         "--set", "N=4", "--set", "M=8", "--set", "newton_maxiter=1",
         "--set", "newton_tol=1e-300"], capsys)
    assert rc == 1
    assert "numerical failure" in err


def test_cmd_run_config_error_exits_2(capsys):
    rc, _, err = run_main(["run", "--set", "problem=unknown_problem",
                           "--set", "d=2"], capsys)
    assert rc == 2
    assert "error:" in err
    rc, _, err = run_main(["run", "--set", "bogus=1"], capsys)
    assert rc == 2
    rc, _, err = run_main(["run"], capsys)  # missing problem key
    assert rc == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# subcommand: sweep
# ---------------------------------------------------------------------------

def test_cmd_sweep_end_to_end(tmp_path, capsys):
    rc, out, _ = run_main(
        ["sweep", "--set", "problem=linear_heat", "--set", "d=2",
         "--set", "M=10", "--set", "sweep_N=4,8",
         "--set", "seeds_per_cell=2", "--output-dir", str(tmp_path)],
        capsys)
    assert rc == 0
    assert "sweep: 4/4 cells ok" in out
    assert "M=10: slope =" in out
    with open(tmp_path / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(r["N"] for r in rows) == {"4", "8"}
    with open(tmp_path / "plot.csv", newline="") as fh:
        prows = list(csv.DictReader(fh))
    assert len(prows) == 2
    assert list(prows[0].keys()) == PLOT_HEADER


def test_cmd_sweep_requires_sweep_n(capsys):
    rc, _, err = run_main(
        ["sweep", "--set", "problem=linear_heat", "--set", "d=2"], capsys)
    assert rc == 2
    assert "sweep_N" in err


def test_sweep_csv_stable_except_runtime(tmp_path, capsys):
    argv = ["sweep", "--set", "problem=linear_heat", "--set", "d=2",
            "--set", "M=8", "--set", "sweep_N=4,8",
            "--set", "seeds_per_cell=1"]
    rc1, _, _ = run_main([*argv, "--output-dir", str(tmp_path / "one")],
                         capsys)
    rc2, _, _ = run_main([*argv, "--output-dir", str(tmp_path / "two")],
                         capsys)
    assert rc1 == rc2 == 0
    with open(tmp_path / "one" / "results.csv", newline="") as fh:
        rows1 = list(csv.DictReader(fh))
    with open(tmp_path / "two" / "results.csv", newline="") as fh:
        rows2 = list(csv.DictReader(fh))
    runtime_col = {"runtime_s"}
    for r1, r2 in zip(rows1, rows2):
        for key in r1:
            if key not in runtime_col:
                assert r1[key] == r2[key], key
    # plot.csv has no runtime column at all -> byte identical
    assert (tmp_path / "one" / "plot.csv").read_bytes() == \
        (tmp_path / "two" / "plot.csv").read_bytes()


# ---------------------------------------------------------------------------
# subcommand: gradtest
# ---------------------------------------------------------------------------

def test_cmd_gradtest_affine_passes(capsys):
    # response noise is a.sigma dW ~ ||a|| sqrt(dt), spread is sqrt(t);
    # the fitted-slope error goes like 1/sqrt(M), ~0.11 here (seed-fixed)
    rc, out, _ = run_main(
        ["gradtest", "--set", "problem=affine_test", "--set", "d=3",
         "--set", "N=6", "--set", "M=200", "--set", "seed=2",
         "--tol", "0.3"], capsys)
    assert rc == 0
    assert "PASS" in out
    values = dict(line.split(" = ", 1) for line in out.splitlines()
                  if " = " in line)
    assert float(values["z_rel_rmse"]) < 0.3
    assert values["level"].startswith("3")


def test_cmd_gradtest_requires_exact_solution(capsys):
    rc, _, err = run_main(
        ["gradtest", "--set", "problem=allen_cahn_dw", "--set", "d=3",
         "--set", "N=4", "--set", "M=10"], capsys)
    assert rc == 2
    assert "exact solution" in err


def test_cmd_gradtest_level_bounds(capsys):
    rc, _, err = run_main(
        ["gradtest", "--set", "problem=affine_test", "--set", "d=2",
         "--set", "N=4", "--set", "M=10", "--level", "9"], capsys)
    assert rc == 2
    assert "--level" in err


def test_cmd_gradtest_fail_exit_code(capsys):
    # intolerably tight tolerance: diagnostic runs fine, check fails
    rc, out, _ = run_main(
        ["gradtest", "--set", "problem=linear_heat", "--set", "d=3",
         "--set", "N=6", "--set", "M=20", "--tol", "1e-12"], capsys)
    assert rc == 1
    assert "FAIL" in out


# ---------------------------------------------------------------------------
# subcommand: scaling
# ---------------------------------------------------------------------------

def test_cmd_scaling_end_to_end(tmp_path, capsys):
    rc, out, _ = run_main(
        ["scaling", "--set", "problem=linear_heat", "--set", "d=2",
         "--set", "M=8", "--set", "sweep_N=4,8",
         "--output-dir", str(tmp_path)], capsys)
    assert rc == 0
    assert "runtime_exponent_vs_N" in out
    with open(tmp_path / "scaling.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert set(rows[0].keys()) == {"N", "M", "runtime_s", "time_forward_s",
                                   "time_regression_s", "time_newton_s"}


# ---------------------------------------------------------------------------
# subcommand: reproduce
# ---------------------------------------------------------------------------

def test_cmd_reproduce_tiny_plan(tmp_path, monkeypatch, capsys):
    def tiny_plan(figure_id, scale="desk"):
        sweep = SweepPlan("linear_heat", 2, n_list=[4, 8], m_list=[10],
                          seeds=[1, 2])
        return ReproducePlan(figure_id, scale, sweep,
                             ReproduceChecks(value_rel_tol=0.9),
                             note="miniature aliased plan")

    monkeypatch.setattr(cli, "reproduce_plan", tiny_plan)
    rc, out, _ = run_main(["reproduce", "ac100", "--output-dir",
                           str(tmp_path)], capsys)
    assert rc == 0
    assert "RESULT: PASS" in out
    for name in ["results.csv", "plot.csv", "summary.txt"]:
        assert (tmp_path / name).exists()
    summary = (tmp_path / "summary.txt").read_text()
    assert "RESULT: PASS" in summary
    assert "total runtime" in summary


def test_cmd_reproduce_unknown_figure_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["reproduce", "unknown_figure"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# console entry point
# ---------------------------------------------------------------------------

def test_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "fbsde_llr.cli", "run",
         "--set", "problem=linear_heat", "--set", "d=2",
         "--set", "N=4", "--set", "M=6"],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "Y0 = " in proc.stdout
