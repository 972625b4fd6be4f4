"""Convergence sweeps, error metrics, slope fits, and runtime scaling.

A sweep runs the solver over a grid of (N, M, seed) cells for one problem,
compares Y0 against the problem's reference value (exact solution when one
exists, a cited constant otherwise), seed-averages absolute errors, and fits
the log-log slope of error against dt per M. Scaling reports time the same
runs and fit cost exponents instead.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backward import run
from .config import SolverConfig
from .errors import FbsdeError, InvalidParameterError
from .model import ProblemSpec, builtin_problem

# reference values quoted for problems without closed-form solutions,
# valid only at (t, x) = (0, query_point)
CITED_REFERENCES = {
    "allen_cahn_dw": 0.0528,
    "burgers": 0.5,
}

DEFAULT_SEEDS_PER_CELL = 5


def reference_value(problem: ProblemSpec, t: float = 0.0,
                    x: np.ndarray | None = None) -> float | None:
    """Reference for u(t, x): exact solution first, cited constant second.

    Cited constants only apply at (0, query_point); anywhere else (and for
    problems with neither) the reference is absent (None).
    """
    x = problem.query_point if x is None else np.asarray(x, dtype=float)
    if problem.exact is not None:
        return float(problem.exact.u(t, x))
    if problem.name in CITED_REFERENCES and t == 0.0 \
            and x.shape == problem.query_point.shape \
            and np.array_equal(x, problem.query_point):
        return CITED_REFERENCES[problem.name]
    return None


def fit_slope(points) -> float:
    """OLS slope of log(err) against log(dt).

    ``points`` is an iterable of (dt, err) pairs; needs >= 2 pairs with
    distinct dt, all dt > 0 and err > 0 (log of a nonpositive error is
    undefined; a zero error means the reference is exact and a slope fit is
    meaningless).
    """
    pts = [(float(dt), float(err)) for dt, err in points]
    if len(pts) < 2:
        raise InvalidParameterError(
            f"slope fit needs >= 2 points, got {len(pts)}")
    dts = np.array([p[0] for p in pts])
    errs = np.array([p[1] for p in pts])
    if np.any(dts <= 0):
        raise InvalidParameterError("slope fit needs dt > 0")
    if np.any(errs <= 0):
        raise InvalidParameterError(
            "slope fit needs err > 0 (log undefined otherwise)")
    if np.unique(dts).size < 2:
        raise InvalidParameterError("slope fit needs distinct dt values")
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


@dataclass
class SweepPlan:
    """Grid of solver runs for one problem."""

    problem_name: str
    dim: int
    horizon: float | None = None          # None = problem default
    params: dict = field(default_factory=dict)
    n_list: list[int] = field(default_factory=lambda: [250, 500, 1000])
    m_list: list[int] = field(default_factory=lambda: [100])
    seeds: list[int] = field(default_factory=lambda: list(
        range(42, 42 + DEFAULT_SEEDS_PER_CELL)))
    reference_kind: str = "auto"          # auto | exact | cited | none
    reference: float | None = None

    def validate(self) -> None:
        if len(self.n_list) < 1 or any(
                b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise InvalidParameterError(
                f"N values must be strictly increasing, got {self.n_list}")
        if len(self.m_list) < 1 or any(m < 2 for m in self.m_list):
            raise InvalidParameterError(
                f"M values must all be >= 2, got {self.m_list}")
        if len(self.seeds) < 1:
            raise InvalidParameterError("need at least one seed per cell")

    def build_problem(self) -> ProblemSpec:
        return builtin_problem(self.problem_name, self.dim,
                               horizon=self.horizon, params=self.params)

    def resolve_reference(self) -> float | None:
        if self.reference_kind == "none":
            return None
        if self.reference_kind == "cited":
            return CITED_REFERENCES.get(self.problem_name)
        ref = reference_value(self.build_problem())
        if self.reference_kind == "exact" and self.build_problem().exact is None:
            raise InvalidParameterError(
                f"problem {self.problem_name!r} has no exact solution")
        return self.reference if self.reference is not None else ref


@dataclass
class SweepResult:
    rows: list[dict]
    reference: float | None
    mean_abs_err: dict          # (N, M) -> seed-averaged |Y0 - ref|
    mean_rel_err: dict          # (N, M) -> mean_abs_err / |ref|
    slopes: dict                # M -> fitted slope (None if < 2 valid N)
    dt_by_n: dict               # N -> dt

    def finest_rel_err(self, m: int) -> float | None:
        ns = sorted({n for (n, mm) in self.mean_rel_err if mm == m})
        if not ns:
            return None
        return self.mean_rel_err[(ns[-1], m)]


def _cell_row(problem_name, dim, horizon, params, n, m, seed, config_base,
              reference):
    """One (N, M, seed) run, returned as a CSV-schema row dict."""
    problem = builtin_problem(problem_name, dim, horizon=horizon,
                              params=params)
    config = config_base.with_updates(n_steps=n, n_particles=m, seed=seed)
    row = {"problem": problem.name, "d": dim, "T": problem.horizon,
           "N": n, "M": m, "seed": seed, "Y0": None, "ref": reference,
           "abs_err": None, "rel_err": None, "runtime_s": None,
           "mean_cg_iters": None, "mean_newton_iters": None, "status": "ok"}
    try:
        report = run(problem, config)
    except FbsdeError as exc:
        row["status"] = type(exc).__name__
        return row
    row["Y0"] = report.y0
    row["runtime_s"] = report.runtime_s
    row["mean_cg_iters"] = report.mean_cg_iters
    row["mean_newton_iters"] = report.mean_newton_iters
    if reference is not None:
        row["abs_err"] = abs(report.y0 - reference)
        if reference != 0:
            row["rel_err"] = row["abs_err"] / abs(reference)
    return row


def run_sweep(plan: SweepPlan, config_base: SolverConfig | None = None,
              parallel: bool = False,
              record_runtimes: bool = True) -> SweepResult:
    """Execute every (N, M, seed) cell of the plan.

    Cell failures are recorded in-row (status column holds the error class
    name) and the sweep continues. ``parallel`` distributes cells across
    processes but is ignored whenever runtimes are recorded — timings must
    not contend for cores.
    """
    plan.validate()
    config_base = config_base or SolverConfig()
    horizon = plan.build_problem().horizon
    reference = plan.resolve_reference()

    cells = [(plan.problem_name, plan.dim, horizon, plan.params, n, m, seed,
              config_base, reference)
             for n in plan.n_list for m in plan.m_list for seed in plan.seeds]
    if parallel and not record_runtimes:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_cell_row_star, cells))
    else:
        rows = [_cell_row(*cell) for cell in cells]

    mean_abs: dict = {}
    mean_rel: dict = {}
    dt_by_n = {n: horizon / n for n in plan.n_list}
    for n in plan.n_list:
        for m in plan.m_list:
            errs = [r["abs_err"] for r in rows
                    if r["N"] == n and r["M"] == m and r["status"] == "ok"
                    and r["abs_err"] is not None]
            if errs:
                mean_abs[(n, m)] = float(np.mean(errs))
                if reference:
                    mean_rel[(n, m)] = mean_abs[(n, m)] / abs(reference)

    slopes: dict = {}
    for m in plan.m_list:
        pts = [(dt_by_n[n], mean_abs[(n, m)]) for n in plan.n_list
               if (n, m) in mean_abs and mean_abs[(n, m)] > 0]
        slopes[m] = fit_slope(pts) if len(pts) >= 2 else None

    return SweepResult(rows=rows, reference=reference, mean_abs_err=mean_abs,
                       mean_rel_err=mean_rel, slopes=slopes, dt_by_n=dt_by_n)


def _cell_row_star(args):
    return _cell_row(*args)


def plot_rows(result: SweepResult) -> list[dict]:
    """Plot-ready rows (dt, mean_abs_err, mean_rel_err, M)."""
    out = []
    for (n, m), err in sorted(result.mean_abs_err.items()):
        out.append({"dt": result.dt_by_n[n], "mean_abs_err": err,
                    "mean_rel_err": result.mean_rel_err.get((n, m)), "M": m})
    return out


# ---------------------------------------------------------------------------
# Runtime scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalingReport:
    rows: list[dict]            # N, M, runtime_s, time_forward_s, ...
    n_exponents: dict           # M -> fitted exponent of runtime vs N
    m_exponents: dict           # N -> fitted exponent of runtime vs M
    n_doubling_ratios: dict     # M -> list of runtime ratios along N

    def summary_lines(self) -> list[str]:
        lines = ["N,M,runtime_s,time_forward_s,time_regression_s,"
                 "time_newton_s"]
        for r in self.rows:
            lines.append(
                f"{r['N']},{r['M']},{r['runtime_s']:.3f},"
                f"{r['time_forward_s']:.3f},{r['time_regression_s']:.3f},"
                f"{r['time_newton_s']:.3f}")
        for m, exp in self.n_exponents.items():
            lines.append(f"runtime_exponent_vs_N[M={m}] = {exp:.3f}")
        for n, exp in self.m_exponents.items():
            lines.append(f"runtime_exponent_vs_M[N={n}] = {exp:.3f}")
        for m, ratios in self.n_doubling_ratios.items():
            pretty = ", ".join(f"{r:.2f}" for r in ratios)
            lines.append(f"runtime_doubling_ratios_N[M={m}] = [{pretty}]")
        return lines


def scaling_report(problem_name: str, dim: int, n_list: list[int],
                   m_list: list[int], horizon: float | None = None,
                   params: dict | None = None,
                   config_base: SolverConfig | None = None) -> ScalingReport:
    """Time one run per (N, M) cell and fit runtime exponents.

    Cells run sequentially (timings must not contend). Forward time is
    reported separately so forward-dominated baselines are visible.
    """
    config_base = config_base or SolverConfig()
    rows = []
    for n in n_list:
        for m in m_list:
            problem = builtin_problem(problem_name, dim, horizon=horizon,
                                      params=dict(params or {}))
            config = config_base.with_updates(n_steps=n, n_particles=m)
            report = run(problem, config)
            rows.append({"N": n, "M": m, "runtime_s": report.runtime_s,
                         "time_forward_s": report.time_forward_s,
                         "time_regression_s": report.time_regression_s,
                         "time_newton_s": report.time_newton_s})

    def _exponent(xs, ts):
        return float(np.polyfit(np.log(xs), np.log(ts), 1)[0])

    n_exponents = {}
    n_ratios = {}
    for m in m_list:
        cells = [(r["N"], r["runtime_s"]) for r in rows if r["M"] == m]
        if len(cells) >= 2:
            n_exponents[m] = _exponent([c[0] for c in cells],
                                       [c[1] for c in cells])
            n_ratios[m] = [b / a for a, b in zip(
                [c[1] for c in cells], [c[1] for c in cells][1:])]
    m_exponents = {}
    for n in n_list:
        cells = [(r["M"], r["runtime_s"]) for r in rows if r["N"] == n]
        if len(cells) >= 2:
            m_exponents[n] = _exponent([c[0] for c in cells],
                                       [c[1] for c in cells])
    return ScalingReport(rows=rows, n_exponents=n_exponents,
                         m_exponents=m_exponents, n_doubling_ratios=n_ratios)


# ---------------------------------------------------------------------------
# Pre-baked reproduction plans
# ---------------------------------------------------------------------------

@dataclass
class ReproduceChecks:
    """Numerical thresholds a reproduction run is judged against."""

    value_rel_tol: float | None = None    # |Y0 - ref|/|ref| at finest N
    slope_range: tuple[float, float] | None = None
    m_slope_max_diff: float | None = None


@dataclass
class ReproducePlan:
    figure_id: str
    scale: str
    sweep: SweepPlan
    checks: ReproduceChecks
    note: str = ""


def reproduce_plan(figure_id: str, scale: str = "desk") -> ReproducePlan:
    """Pre-baked sweep + thresholds for one benchmark figure.

    Desk scale keeps d and N small enough for minutes-scale laptop runs;
    paper scale restores the original extremes (documented multi-hour
    runtimes, opt-in only).
    """
    if scale not in ("desk", "paper"):
        raise InvalidParameterError(
            f"unknown scale {scale!r}; expected desk or paper")
    seeds = list(range(42, 47))
    if figure_id == "ac100":
        if scale == "desk":
            sweep = SweepPlan("allen_cahn_dw", 100, n_list=[400, 800, 1600,
                                                            3200],
                              m_list=[100], seeds=seeds)
        else:
            sweep = SweepPlan("allen_cahn_dw", 100,
                              n_list=[300, 600, 1200, 2400, 4800],
                              m_list=[50, 100, 200], seeds=seeds)
        return ReproducePlan(
            figure_id, scale, sweep,
            ReproduceChecks(value_rel_tol=0.02, slope_range=(0.7, 1.3)),
            note="double-well Allen-Cahn at d=100; reference 0.0528")
    if figure_id == "ac_log":
        if scale == "desk":
            sweep = SweepPlan("allen_cahn_log", 100,
                              n_list=[200, 400, 800, 1600], m_list=[100],
                              seeds=seeds)
        else:
            sweep = SweepPlan("allen_cahn_log", 100,
                              n_list=[600, 1200, 2400, 4800],
                              m_list=[50, 100, 200], seeds=seeds)
        return ReproducePlan(
            figure_id, scale, sweep, ReproduceChecks(),
            note="log-potential Allen-Cahn with manufactured source; "
                 "report-only (no acceptance thresholds)")
    if figure_id == "burgers":
        if scale == "desk":
            sweep = SweepPlan("burgers", 500, n_list=[200, 400, 800, 1600],
                              m_list=[100], seeds=seeds)
        else:
            sweep = SweepPlan("burgers", 10000,
                              n_list=[1200, 2400, 4800], m_list=[100],
                              seeds=seeds[:3])
        return ReproducePlan(
            figure_id, scale, sweep,
            ReproduceChecks(value_rel_tol=0.02, slope_range=(0.7, 1.3)),
            note="Burgers-type PDE; reference u(0,0)=0.5"
                 + ("" if scale == "desk"
                    else "; paper scale d=10^4 takes hours"))
    if figure_id == "hj":
        if scale == "desk":
            sweep = SweepPlan("hj_gradient_sink", 50,
                              n_list=[800, 1600, 3200, 6400],
                              m_list=[50, 100], seeds=seeds)
        else:
            sweep = SweepPlan("hj_gradient_sink", 500,
                              n_list=[2000, 4000, 8000, 16000], m_list=[100],
                              seeds=seeds[:3])
        return ReproducePlan(
            figure_id, scale, sweep,
            ReproduceChecks(value_rel_tol=0.01, slope_range=(0.7, 1.3),
                            m_slope_max_diff=0.2),
            note="heat-kernel solution with gradient-sink nonlinearity")
    raise InvalidParameterError(
        f"unknown figure id {figure_id!r}; expected one of "
        f"ac100, ac_log, burgers, hj")


def evaluate_reproduction(plan: ReproducePlan,
                          result: SweepResult) -> tuple[bool, list[str]]:
    """Judge a reproduction sweep against its thresholds.

    Returns (passed, report lines). Plans without thresholds always pass
    (report-only).
    """
    lines = [f"figure {plan.figure_id} ({plan.scale}): {plan.note}"]
    if result.reference is not None:
        lines.append(f"reference = {result.reference:.17g}")
    passed = True
    for m in plan.sweep.m_list:
        slope = result.slopes.get(m)
        finest = result.finest_rel_err(m)
        lines.append(
            f"M={m}: slope = "
            + (f"{slope:.3f}" if slope is not None else "n/a")
            + ", finest-N rel err = "
            + (f"{finest:.3e}" if finest is not None else "n/a"))
        if plan.checks.value_rel_tol is not None:
            if finest is None or finest > plan.checks.value_rel_tol:
                passed = False
                lines.append(
                    f"  FAIL value: rel err "
                    + (f"{finest:.3e}" if finest is not None else "n/a")
                    + f" > {plan.checks.value_rel_tol}")
            else:
                lines.append(f"  PASS value: rel err {finest:.3e} <= "
                             f"{plan.checks.value_rel_tol}")
        if plan.checks.slope_range is not None:
            lo, hi = plan.checks.slope_range
            if slope is None or not (lo <= slope <= hi):
                passed = False
                lines.append(
                    f"  FAIL slope: "
                    + (f"{slope:.3f}" if slope is not None else "n/a")
                    + f" outside [{lo}, {hi}]")
            else:
                lines.append(f"  PASS slope: {slope:.3f} in [{lo}, {hi}]")
    if plan.checks.m_slope_max_diff is not None \
            and len(plan.sweep.m_list) >= 2:
        slopes = [result.slopes.get(m) for m in plan.sweep.m_list]
        if any(s is None for s in slopes):
            passed = False
            lines.append("  FAIL slope-vs-M: missing slopes")
        else:
            spread = max(slopes) - min(slopes)
            if spread > plan.checks.m_slope_max_diff:
                passed = False
                lines.append(f"  FAIL slope-vs-M: spread {spread:.3f} > "
                             f"{plan.checks.m_slope_max_diff}")
            else:
                lines.append(f"  PASS slope-vs-M: spread {spread:.3f} <= "
                             f"{plan.checks.m_slope_max_diff}")
    lines.append("RESULT: " + ("PASS" if passed else "FAIL"))
    return passed, lines
