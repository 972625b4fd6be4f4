"""Command-line front end.

Subcommands:
  run        one solve, report printed as key = value lines
  sweep      (N, M, seed) grid, errors + fitted slopes, CSV output
  gradtest   gradient-estimator diagnostic against an exact solution
  scaling    runtime table + fitted cost exponents vs N and M
  reproduce  pre-baked benchmark sweeps judged against thresholds

Config files are flat ``key = value`` text, one pair per line, ``#`` for
comments. Unknown keys are hard errors naming the key and line. Overrides
via repeated ``--set key=value`` win over file values.

Exit codes: 0 success, 1 numerical/acceptance failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backward import run
from .config import SolverConfig
from .errors import (ConfigError, FbsdeError, InvalidParameterError,
                     UnknownProblemError)
from .forward import dump_level, restore_level, simulate_paths
from .harness import (SweepPlan, evaluate_reproduction, plot_rows,
                      reference_value, reproduce_plan, run_sweep,
                      scaling_report)
from .model import (ProblemSpec, apply_diffusion_transpose, builtin_problem)
from .regress import estimate_gradient

log = logging.getLogger("fbsde_llr")

CSV_HEADER = ["problem", "d", "T", "N", "M", "seed", "Y0", "ref", "abs_err",
              "rel_err", "runtime_s", "mean_cg_iters", "mean_newton_iters",
              "status"]
PLOT_HEADER = ["dt", "mean_abs_err", "mean_rel_err", "M"]

# config-file grammar: every key maps 1:1 onto a solver/problem/sweep field
_INT_KEYS = {"d", "N", "M", "seed", "newton_maxiter", "seeds_per_cell"}
_FLOAT_KEYS = {"T", "bandwidth_c", "cg_tol", "newton_tol",
               "memory_budget_mb", "nu", "theta", "theta_c", "kappa"}
_STR_KEYS = {"problem", "kernel", "bandwidth_rule"}
_AUTO_FLOAT_KEYS = {"ridge_lambda"}      # "auto" or a float
_AUTO_INT_KEYS = {"cg_maxiter"}          # "auto" or an int
_LIST_KEYS = {"sweep_N", "sweep_M"}      # comma-separated ints
_PROBLEM_PARAM_KEYS = {"nu", "theta", "theta_c", "kappa"}
KNOWN_KEYS = (_INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _AUTO_FLOAT_KEYS
              | _AUTO_INT_KEYS | _LIST_KEYS)

# canonical serialization order (round-trip stable)
_KEY_ORDER = ["problem", "d", "T", "N", "M", "seed", "kernel",
              "bandwidth_rule", "bandwidth_c", "ridge_lambda", "cg_tol",
              "cg_maxiter", "newton_tol", "newton_maxiter",
              "memory_budget_mb", "sweep_N", "sweep_M", "seeds_per_cell",
              "nu", "theta", "theta_c", "kappa"]


@dataclass
class ParsedConfig:
    """Everything a config file (plus overrides) can express."""

    problem_name: str | None = None
    dim: int | None = None
    horizon: float | None = None
    params: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep_n: list | None = None
    sweep_m: list | None = None
    seeds_per_cell: int = 5

    def build_problem(self) -> ProblemSpec:
        if self.problem_name is None:
            raise ConfigError("config is missing required key 'problem'")
        if self.dim is None:
            raise ConfigError("config is missing required key 'd'")
        return builtin_problem(self.problem_name, self.dim,
                               horizon=self.horizon, params=dict(self.params))

    def build_sweep_plan(self) -> SweepPlan:
        if not self.sweep_n:
            raise ConfigError(
                "sweep needs 'sweep_N' (comma-separated N values)")
        problem = self.build_problem()   # validates problem/d/params
        seeds = [self.solver.seed + i for i in range(self.seeds_per_cell)]
        return SweepPlan(self.problem_name, self.dim, horizon=self.horizon,
                         params=dict(self.params), n_list=list(self.sweep_n),
                         m_list=list(self.sweep_m or [self.solver.n_particles]),
                         seeds=seeds)


def _parse_value(key: str, raw: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _AUTO_FLOAT_KEYS:
            return "auto" if raw == "auto" else float(raw)
        if key in _AUTO_INT_KEYS:
            return "auto" if raw == "auto" else int(raw)
        if key in _LIST_KEYS:
            items = [int(tok) for tok in raw.split(",") if tok.strip() != ""]
            if not items:
                raise ValueError("empty list")
            return items
        return raw  # _STR_KEYS
    except ValueError as exc:
        raise ConfigError(
            f"invalid value for key '{key}' {where}: {raw!r} ({exc})"
        ) from None


def _apply_pair(cfg: ParsedConfig, key: str, raw: str, where: str) -> None:
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key '{key}' {where}")
    value = _parse_value(key, raw, where)
    if key == "problem":
        cfg.problem_name = value
    elif key == "d":
        cfg.dim = value
    elif key == "T":
        cfg.horizon = value
    elif key == "N":
        cfg.solver = replace(cfg.solver, n_steps=value)
    elif key == "M":
        cfg.solver = replace(cfg.solver, n_particles=value)
    elif key == "sweep_N":
        cfg.sweep_n = value
    elif key == "sweep_M":
        cfg.sweep_m = value
    elif key == "seeds_per_cell":
        cfg.seeds_per_cell = value
    elif key in _PROBLEM_PARAM_KEYS:
        cfg.params[key] = value
    else:
        cfg.solver = replace(cfg.solver, **{key: value})


def parse_config(path: str | Path | None,
                 overrides: list | None = None,
                 seed: int | None = None) -> ParsedConfig:
    """Parse a flat key=value config file plus --set overrides.

    Unknown keys, unparsable values, and constraint violations raise
    ConfigError naming the key and where it came from. Later occurrences of
    a key win; overrides win over file values; an explicit ``seed`` wins
    over everything.
    """
    cfg = ParsedConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") \
                from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"expected 'key = value' at line {lineno} of {path}: "
                    f"{line.strip()!r}")
            key, _, raw = stripped.partition("=")
            _apply_pair(cfg, key.strip(), raw.strip(),
                        f"at line {lineno} of {path}")
    for i, item in enumerate(overrides or [], start=1):
        if "=" not in item:
            raise ConfigError(
                f"--set expects key=value, got {item!r} (override #{i})")
        key, _, raw = item.partition("=")
        _apply_pair(cfg, key.strip(), raw.strip(), f"in --set #{i}")
    if seed is not None:
        cfg.solver = replace(cfg.solver, seed=seed)
    cfg.solver.validate(dim=cfg.dim)
    return cfg


def _format_value(key: str, value) -> str:
    if key in _LIST_KEYS:
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def serialize_config(cfg: ParsedConfig) -> str:
    """Render a ParsedConfig back to config-file text.

    parse(serialize(parse(f))) == parse(f): defaults are materialized, so
    the round trip is stable.
    """
    values = {"N": cfg.solver.n_steps, "M": cfg.solver.n_particles,
              "seed": cfg.solver.seed, "kernel": cfg.solver.kernel,
              "bandwidth_rule": cfg.solver.bandwidth_rule,
              "bandwidth_c": cfg.solver.bandwidth_c,
              "ridge_lambda": cfg.solver.ridge_lambda,
              "cg_tol": cfg.solver.cg_tol,
              "cg_maxiter": cfg.solver.cg_maxiter,
              "newton_tol": cfg.solver.newton_tol,
              "newton_maxiter": cfg.solver.newton_maxiter,
              "memory_budget_mb": cfg.solver.memory_budget_mb,
              "seeds_per_cell": cfg.seeds_per_cell}
    if cfg.problem_name is not None:
        values["problem"] = cfg.problem_name
    if cfg.dim is not None:
        values["d"] = cfg.dim
    if cfg.horizon is not None:
        values["T"] = cfg.horizon
    if cfg.sweep_n is not None:
        values["sweep_N"] = cfg.sweep_n
    if cfg.sweep_m is not None:
        values["sweep_M"] = cfg.sweep_m
    for key in _PROBLEM_PARAM_KEYS:
        if key in cfg.params:
            values[key] = cfg.params[key]
    lines = [f"{key} = {_format_value(key, values[key])}"
             for key in _KEY_ORDER if key in values]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _render_field(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)

def emit_csv(rows: list, path: str | Path,
             header: list | None = None) -> None:
    """Write row dicts as CSV: 17-significant-digit floats, UTF-8, LF."""
    header = header or CSV_HEADER
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_render_field(row.get(col))
                                 for col in header])
    except OSError as exc:
        raise ConfigError(f"cannot write CSV to {path}: {exc}") from None


def report_row(report, problem: ProblemSpec) -> dict:
    """RunReport -> one CSV-schema row."""
    ref = reference_value(problem)
    row = {"problem": problem.name, "d": problem.dim, "T": problem.horizon,
           "N": report.n_steps, "M": report.n_particles,
           "seed": report.seed, "Y0": report.y0, "ref": ref,
           "abs_err": None, "rel_err": None,
           "runtime_s": report.runtime_s,
           "mean_cg_iters": report.mean_cg_iters,
           "mean_newton_iters": report.mean_newton_iters,
           "status": report.status}
    if ref is not None:
        row["abs_err"] = abs(report.y0 - ref)
        if ref != 0:
            row["rel_err"] = row["abs_err"] / abs(ref)
    return row


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _ensure_outdir(args) -> Path | None:
    if args.output_dir is None:
        return None
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set, args.seed)
    problem = cfg.build_problem()
    store = None
    if args.dump_level is not None:
        store = simulate_paths(problem, cfg.solver)
        state = restore_level(store, args.dump_level)
        dump_path = args.dump_out or f"level_{args.dump_level:06d}.bin"
        dump_level(state, cfg.solver.seed, dump_path)
        print(f"wrote level {args.dump_level} to {dump_path}")
    report = run(problem, cfg.solver, store=store)
    for line in report.summary_lines():
        print(line)
    ref = reference_value(problem)
    if ref is not None:
        abs_err = abs(report.y0 - ref)
        print(f"ref = {format(ref, '.17g')}")
        print(f"abs_err = {format(abs_err, '.17g')}")
        if ref != 0:
            print(f"rel_err = {format(abs_err / abs(ref), '.17g')}")
    out = _ensure_outdir(args)
    if out is not None:
        emit_csv([report_row(report, problem)], out / "results.csv")
        print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config, args.set, args.seed)
    plan = cfg.build_sweep_plan()
    result = run_sweep(plan, cfg.solver, parallel=args.parallel,
                       record_runtimes=not args.parallel)
    n_ok = sum(1 for r in result.rows if r["status"] == "ok")
    print(f"sweep: {n_ok}/{len(result.rows)} cells ok")
    for m, slope in sorted(result.slopes.items()):
        finest = result.finest_rel_err(m)
        print(f"M={m}: slope = "
              + (f"{slope:.4f}" if slope is not None else "n/a")
              + ", finest-N rel err = "
              + (f"{finest:.4e}" if finest is not None else "n/a"))
    out = _ensure_outdir(args)
    if out is not None:
        emit_csv(result.rows, out / "results.csv")
        emit_csv(plot_rows(result), out / "plot.csv", header=PLOT_HEADER)
        print(f"wrote {out / 'results.csv'} and {out / 'plot.csv'}")
    return 0 if n_ok > 0 else 1


def cmd_gradtest(args) -> int:
    """Check the regression gradient against an exact solution.

    Builds one forward level, feeds exact next-level values as responses,
    and compares the estimated z at every anchor with sigma^T grad u. This
    isolates the spatial regression from time discretization and Newton.
    """
    cfg = parse_config(args.config, args.set, args.seed)
    problem = cfg.build_problem()
    if problem.exact is None:
        raise ConfigError(
            f"gradtest needs a problem with an exact solution; "
            f"{problem.name!r} has none")
    store = simulate_paths(problem, cfg.solver)
    n = cfg.solver.n_steps
    k = args.level if args.level is not None else n // 2
    if not 0 <= k <= n - 1:
        raise ConfigError(f"--level must be in [0, {n - 1}], got {k}")
    level = restore_level(store, k)
    level_next = restore_level(store, k + 1)
    responses = np.array([problem.exact.u(level_next.time, x)
                          for x in level_next.positions])
    m = level.positions.shape[0]
    err_sq = 0.0
    true_sq = 0.0
    max_abs = 0.0
    cg_total = 0
    for anchor in range(m):
        z_hat, diag = estimate_gradient(anchor, level, responses, problem,
                                        cfg.solver)
        z_true = apply_diffusion_transpose(
            problem.diffusion,
            np.asarray(problem.exact.grad_u(level.time,
                                            level.positions[anchor]),
                       dtype=float))
        diff = z_hat - z_true
        err_sq += float(diff @ diff)
        true_sq += float(z_true @ z_true)
        max_abs = max(max_abs, float(np.max(np.abs(diff))))
        cg_total += diag.iterations
    rmse = (err_sq / (m * problem.dim)) ** 0.5
    true_rms = (true_sq / (m * problem.dim)) ** 0.5
    rel = rmse / true_rms if true_rms > 0 else rmse
    print(f"problem = {problem.name}")
    print(f"level = {k} (t = {format(level.time, '.17g')})")
    print(f"anchors = {m}")
    print(f"z_rmse = {format(rmse, '.17g')}")
    print(f"z_true_rms = {format(true_rms, '.17g')}")
    print(f"z_rel_rmse = {format(rel, '.17g')}")
    print(f"z_max_abs_err = {format(max_abs, '.17g')}")
    print(f"mean_cg_iters = {cg_total / m:.2f}")
    if rel > args.tol:
        print(f"FAIL: relative RMSE {rel:.4e} > tol {args.tol}")
        return 1
    print(f"PASS: relative RMSE {rel:.4e} <= tol {args.tol}")
    return 0


def cmd_scaling(args) -> int:
    cfg = parse_config(args.config, args.set, args.seed)
    if not cfg.sweep_n:
        raise ConfigError(
            "scaling needs 'sweep_N' (comma-separated N values)")
    m_list = list(cfg.sweep_m or [cfg.solver.n_particles])
    report = scaling_report(cfg.problem_name, cfg.dim,
                            n_list=list(cfg.sweep_n), m_list=m_list,
                            horizon=cfg.horizon, params=dict(cfg.params),
                            config_base=cfg.solver)
    for line in report.summary_lines():
        print(line)
    out = _ensure_outdir(args)
    if out is not None:
        header = ["N", "M", "runtime_s", "time_forward_s",
                  "time_regression_s", "time_newton_s"]
        emit_csv(report.rows, out / "scaling.csv", header=header)
        print(f"wrote {out / 'scaling.csv'}")
    return 0


def cmd_reproduce(args) -> int:
    plan = reproduce_plan(args.figure, args.scale)
    base = SolverConfig()
    if args.seed is not None:
        plan.sweep.seeds = [args.seed + i
                            for i in range(len(plan.sweep.seeds))]
    t0 = time.perf_counter()
    result = run_sweep(plan.sweep, base)
    elapsed = time.perf_counter() - t0
    passed, lines = evaluate_reproduction(plan, result)
    out = Path(args.output_dir or f"reproduce_{args.figure}_{args.scale}")
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(result.rows, out / "results.csv")
    emit_csv(plot_rows(result), out / "plot.csv", header=PLOT_HEADER)
    lines.append(f"total runtime: {elapsed:.1f} s")
    (out / "summary.txt").write_text("\n".join(lines) + "\n",
                                     encoding="utf-8")
    for line in lines:
        print(line)
    print(f"wrote {out / 'results.csv'}, {out / 'plot.csv'}, "
          f"{out / 'summary.txt'}")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub) -> None:
    sub.add_argument("--config", help="path to key = value config file")
    sub.add_argument("--set", action="append", default=[],
                     metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the base seed")
    sub.add_argument("--output-dir", default=None,
                     help="directory for CSV output")
    sub.add_argument("-v", "--verbose", action="count", default=0,
                     help="-v for info, -vv for debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsde-llr",
        description="Solve semilinear parabolic PDEs by forward particle "
                    "simulation plus backward local linear regression.")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="single solve")
    _add_common(p_run)
    p_run.add_argument("--dump-level", type=int, default=None, metavar="K",
                       help="also write particle level K as a binary dump")
    p_run.add_argument("--dump-out", default=None,
                       help="path for --dump-level output")
    p_run.set_defaults(func=cmd_run)

    p_sweep = subs.add_parser("sweep", help="(N, M, seed) grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--parallel", action="store_true",
                         help="run cells across processes "
                              "(disables runtime recording)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_grad = subs.add_parser(
        "gradtest", help="gradient estimator vs exact solution")
    _add_common(p_grad)
    p_grad.add_argument("--level", type=int, default=None,
                        help="forward level to test (default N//2)")
    p_grad.add_argument("--tol", type=float, default=0.5,
                        help="max allowed relative RMSE of z (default 0.5)")
    p_grad.set_defaults(func=cmd_gradtest)

    p_scale = subs.add_parser("scaling", help="runtime scaling table")
    _add_common(p_scale)
    p_scale.set_defaults(func=cmd_scaling)

    p_rep = subs.add_parser("reproduce", help="pre-baked benchmark sweep")
    p_rep.add_argument("figure", choices=["ac100", "ac_log", "burgers",
                                          "hj"])
    p_rep.add_argument("--scale", choices=["desk", "paper"], default="desk")
    p_rep.add_argument("--seed", type=int, default=None)
    p_rep.add_argument("--output-dir", default=None)
    p_rep.add_argument("-v", "--verbose", action="count", default=0)
    p_rep.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO,
             logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError, UnknownProblemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FbsdeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
