"""Backward sweep of the scheme.

At each level k (from N-1 down to 0), every particle solves the implicit
scalar closure

    y_m = mean_j(Y_{k+1}^j) + f(t_k, X_k^m, y_m, z_m) * dt

by damped Newton iteration, where z_m = sigma^T alpha_x^m comes from the
kernel-weighted local linear regression of the level-(k+1) responses on the
level-k displacements around X_k^m. The value estimate is
Y_0 = mean_m(Y_0^m) after the last step.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import SolverConfig
from .errors import (BlowupError, DegenerateNeighborhoodError,
                     NewtonConvergenceError)
from .forward import (LevelState, PathStore, iter_levels_backward,
                      restore_level, simulate_paths)
from .model import ProblemSpec, apply_diffusion_transpose
from .regress import (auto_ridge_lambda, _cg_batch, kernel_value,
                      pairwise_distances)

# BLAS thread count is pinned during run() so that reductions inside GEMMs
# have a fixed association order regardless of ambient OMP/MKL settings;
# bitwise reproducibility of Y_0 depends on it
BLAS_THREADS = min(4, os.cpu_count() or 1)

NEWTON_FD_STEP_FLOOR = 1e-6
NEWTON_MAX_HALVINGS = 20
JACOBIAN_FLOOR = 1e-12


def ensemble_mean(values: np.ndarray) -> float:
    """Mean of the ensemble with an exact all-equal fast path.

    numpy's pairwise summation is deterministic, but dividing the pairwise
    sum of M copies of c by M is not bitwise c for every (c, M); the
    zero-driver collapse of the scheme requires exactness, hence the fast
    path.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError(f"expected a nonempty 1-d array, got {values.shape}")
    first = values[0]
    if np.all(values == first):
        return float(first)
    return float(np.add.reduce(values) / values.size)


# ---------------------------------------------------------------------------
# Newton closure
# ---------------------------------------------------------------------------

def _newton_batch(mean_next: float, t: float, x: np.ndarray, z: np.ndarray,
                  problem: ProblemSpec, dt: float, tol: float,
                  maxiter: int, level: int | None = None):
    """Solve y = mean + f(t, x, y, z) dt for every particle at once.

    Starts at y = mean (zero-iteration exit when the residual is already
    within tol — in particular f == 0 returns mean bitwise). Uses the
    problem's analytic dy-derivative when present, otherwise a central
    difference with step max(1e-6, 1e-6 |y|). Full Newton steps that do not
    reduce |F| are halved up to 20 times; running out of halvings, a flat
    Jacobian, or maxiter raise NewtonConvergenceError with diagnostics.
    """
    m = x.shape[0]
    y = np.full(m, mean_next, dtype=float)

    def residual(yv, xv, zv):
        f = np.asarray(problem.driver(t, xv, yv, zv), dtype=float)
        return yv - mean_next - f * dt

    f_res = residual(y, x, z)
    if not np.all(np.isfinite(f_res)):
        j = int(np.flatnonzero(~np.isfinite(f_res))[0])
        raise BlowupError(
            f"driver produced non-finite value at particle {j}"
            + (f", level {level}" if level is not None else ""),
            particle=j, level=level)
    active = np.abs(f_res) > tol
    iters = np.zeros(m, dtype=int)

    it = 0
    while np.any(active):
        if it >= maxiter:
            j = int(np.argmax(np.where(active, np.abs(f_res), -np.inf)))
            raise NewtonConvergenceError(
                f"Newton failed to converge within {maxiter} iterations at "
                f"particle {j}" + (f", level {level}" if level is not None
                                   else "")
                + f": y={y[j]!r}, |F|={abs(f_res[j]):.3e}",
                particle=j, level=level, last_value=float(y[j]),
                last_residual=float(abs(f_res[j])))
        idx = np.flatnonzero(active)
        xa, za, ya = x[idx], z[idx], y[idx]
        if problem.driver_dy is not None:
            fy = np.asarray(problem.driver_dy(t, xa, ya, za), dtype=float)
        else:
            h = np.maximum(NEWTON_FD_STEP_FLOOR,
                           NEWTON_FD_STEP_FLOOR * np.abs(ya))
            f_hi = np.asarray(problem.driver(t, xa, ya + h, za), dtype=float)
            f_lo = np.asarray(problem.driver(t, xa, ya - h, za), dtype=float)
            fy = (f_hi - f_lo) / (2.0 * h)
        fprime = 1.0 - dt * fy
        flat = np.abs(fprime) < JACOBIAN_FLOOR
        if np.any(flat):
            j = int(idx[np.flatnonzero(flat)[0]])
            raise NewtonConvergenceError(
                f"Newton Jacobian vanished (|F'| < {JACOBIAN_FLOOR}) at "
                f"particle {j}" + (f", level {level}" if level is not None
                                   else "") + f": y={y[j]!r}",
                particle=j, level=level, last_value=float(y[j]),
                last_residual=float(abs(f_res[j])))
        step = f_res[idx] / fprime
        scale = np.ones(idx.size)
        y_try = ya - scale * step
        f_try = residual(y_try, xa, za)
        for _ in range(NEWTON_MAX_HALVINGS):
            worse = np.abs(f_try) > np.abs(f_res[idx])
            if not np.any(worse):
                break
            scale[worse] *= 0.5
            y_try = ya - scale * step
            f_try = residual(y_try, xa, za)
        else:
            worse = np.abs(f_try) > np.abs(f_res[idx])
            if np.any(worse):
                j = int(idx[np.flatnonzero(worse)[0]])
                raise NewtonConvergenceError(
                    f"Newton step failed to reduce |F| after "
                    f"{NEWTON_MAX_HALVINGS} halvings at particle {j}"
                    + (f", level {level}" if level is not None else ""),
                    particle=j, level=level, last_value=float(y[j]),
                    last_residual=float(abs(f_res[j])))
        y[idx] = y_try
        f_res[idx] = f_try
        iters[idx] += 1
        active[idx] = np.abs(f_try) > tol
        it += 1
    return y, iters


def newton_solve_y(mean_next: float, t: float, x: np.ndarray, z: np.ndarray,
                   problem: ProblemSpec, dt: float, tol: float = 1e-12,
                   maxiter: int = 50) -> tuple[float, int]:
    """Scalar convenience wrapper around the batched Newton closure."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    y, iters = _newton_batch(mean_next, t, x[None, :], z[None, :], problem,
                             dt, tol, maxiter)
    return float(y[0]), int(iters[0])


# ---------------------------------------------------------------------------
# Backward step and full run
# ---------------------------------------------------------------------------

@dataclass
class BackwardState:
    """One completed backward level with its per-particle diagnostics."""

    k: int
    y_values: np.ndarray        # (M,)
    newton_iters: np.ndarray    # (M,)
    z_norms: np.ndarray         # (M,)
    cg_iters: np.ndarray        # (M,)
    residual_norms: np.ndarray  # (M,)
    cg_nonconverged: int
    bandwidth_min: float
    bandwidth_max: float
    time_regression_s: float
    time_newton_s: float


def backward_step(level: LevelState, y_next: np.ndarray,
                  problem: ProblemSpec, config: SolverConfig,
                  dt: float) -> BackwardState:
    """One backward level: regression for z, Newton for y, per particle.

    The ensemble mean of y_next is computed once and shared by all anchors;
    each anchor m then gets its own z_m from the batched local linear
    regression and its own Newton solve.
    """
    pos = level.positions
    m, d = pos.shape
    y_next = np.asarray(y_next, dtype=float)
    if not np.all(np.isfinite(y_next)):
        j = int(np.flatnonzero(~np.isfinite(y_next))[0])
        raise BlowupError(
            f"non-finite response entering level {level.level} "
            f"(particle {j})", particle=j, level=level.level)
    mean_next = ensemble_mean(y_next)

    t_reg = time.perf_counter()
    if np.all(pos == pos[0]):
        # all particles coincide (the deterministic level 0): weights are
        # uniform, the x-block of the normal system is exactly singular with
        # zero right-hand side, and the minimum-norm gradient is 0
        z = np.zeros((m, d))
        cg_iters = np.zeros(m, dtype=int)
        resnorms = np.zeros(m)
        nonconv = 0
        bw_min = bw_max = 0.0
    else:
        dist = pairwise_distances(pos)
        if config.bandwidth_rule == "max_distance":
            eps = dist.max(axis=1)
            if np.any(eps <= 0):
                j = int(np.flatnonzero(eps <= 0)[0])
                raise DegenerateNeighborhoodError(
                    f"zero bandwidth at anchor {j}, level {level.level}")
        elif config.bandwidth_rule == "scaled_sqrt_dt":
            eps = np.full(m, config.bandwidth_c * np.sqrt(dt))
        else:  # fixed
            eps = np.full(m, config.bandwidth_c)
        raw = kernel_value(config.kernel, dist / eps[:, None])
        totals = raw.sum(axis=1)
        if np.any(totals <= 0):
            j = int(np.flatnonzero(totals <= 0)[0])
            raise DegenerateNeighborhoodError(
                f"all kernel weights vanished at anchor {j}, "
                f"level {level.level}; increase the bandwidth")
        w_mat = raw / totals[:, None]
        if config.ridge_lambda == "auto":
            lams = 1e-8 * np.einsum("am,am->a", w_mat, dist ** 2) / d
        else:
            lams = np.full(m, float(config.ridge_lambda))
        a0, ax, cg_iters, resnorms, conv = _cg_batch(
            pos, pos, w_mat, lams, y_next, config.cg_tol,
            config.resolved_cg_maxiter(d))
        nonconv = int(np.count_nonzero(~conv))
        z = apply_diffusion_transpose(problem.diffusion, ax)
        bw_min, bw_max = float(eps.min()), float(eps.max())
    t_reg = time.perf_counter() - t_reg

    t_newton = time.perf_counter()
    y, newton_iters = _newton_batch(mean_next, level.time, pos, z, problem,
                                    dt, config.newton_tol,
                                    config.newton_maxiter, level=level.level)
    t_newton = time.perf_counter() - t_newton

    return BackwardState(
        k=level.level, y_values=y, newton_iters=newton_iters,
        z_norms=np.sqrt(np.sum(z ** 2, axis=1)),
        cg_iters=cg_iters, residual_norms=resnorms, cg_nonconverged=nonconv,
        bandwidth_min=bw_min, bandwidth_max=bw_max,
        time_regression_s=t_reg, time_newton_s=t_newton)


@dataclass
class RunReport:
    """Everything a solver run produced, ready for reporting."""

    problem: str
    dim: int
    horizon: float
    n_steps: int
    n_particles: int
    seed: int
    y0: float
    runtime_s: float
    time_forward_s: float
    time_regression_s: float
    time_newton_s: float
    mean_cg_iters: float
    max_cg_iters: int
    mean_newton_iters: float
    max_newton_iters: int
    storage_mode: str
    storage_stride: int
    cg_nonconverged: int = 0
    clamp_events: int = 0
    status: str = "ok"
    params: dict = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        """Flat key=value text block (one field per line)."""
        return [
            f"problem = {self.problem}",
            f"d = {self.dim}",
            f"T = {self.horizon:.17g}",
            f"N = {self.n_steps}",
            f"M = {self.n_particles}",
            f"seed = {self.seed}",
            f"Y0 = {self.y0:.17g}",
            f"runtime_s = {self.runtime_s:.3f}",
            f"time_forward_s = {self.time_forward_s:.3f}",
            f"time_regression_s = {self.time_regression_s:.3f}",
            f"time_newton_s = {self.time_newton_s:.3f}",
            f"mean_cg_iters = {self.mean_cg_iters:.3f}",
            f"max_cg_iters = {self.max_cg_iters}",
            f"mean_newton_iters = {self.mean_newton_iters:.3f}",
            f"max_newton_iters = {self.max_newton_iters}",
            f"cg_nonconverged = {self.cg_nonconverged}",
            f"storage_mode = {self.storage_mode}",
            f"storage_stride = {self.storage_stride}",
            f"clamp_events = {self.clamp_events}",
            f"status = {self.status}",
        ]


def run(problem: ProblemSpec, config: SolverConfig,
        store: PathStore | None = None) -> RunReport:
    """Forward simulation plus full backward sweep.

    Passing a pre-built ``store`` skips the forward phase (used by level-dump
    tooling); it must have been simulated with the same problem and config.
    """
    config.validate(dim=problem.dim)
    clamp_start = (problem.clamp_counter.events
                   if problem.clamp_counter is not None else 0)
    t_total = time.perf_counter()
    with threadpool_limits(limits=BLAS_THREADS):
        t_fwd = time.perf_counter()
        if store is None:
            store = simulate_paths(problem, config)
        t_fwd = time.perf_counter() - t_fwd
        dt = store.dt

        terminal = restore_level(store, store.n_steps)
        y = np.asarray(problem.terminal(terminal.positions), dtype=float)
        if y.shape != (config.n_particles,):
            raise BlowupError(
                f"terminal condition returned shape {y.shape}, expected "
                f"({config.n_particles},)")
        if not np.all(np.isfinite(y)):
            j = int(np.flatnonzero(~np.isfinite(y))[0])
            raise BlowupError(
                f"non-finite terminal value at particle {j}", particle=j,
                level=store.n_steps)

        cg_sum = 0.0
        cg_count = 0
        cg_max = 0
        cg_nonconv = 0
        newton_sum = 0.0
        newton_count = 0
        newton_max = 0
        time_reg = 0.0
        time_newton = 0.0
        for state in iter_levels_backward(store, start=store.n_steps - 1):
            bstate = backward_step(state, y, problem, config, dt)
            y = bstate.y_values
            cg_sum += float(bstate.cg_iters.sum())
            cg_count += bstate.cg_iters.size
            cg_max = max(cg_max, int(bstate.cg_iters.max(initial=0)))
            cg_nonconv += bstate.cg_nonconverged
            newton_sum += float(bstate.newton_iters.sum())
            newton_count += bstate.newton_iters.size
            newton_max = max(newton_max,
                             int(bstate.newton_iters.max(initial=0)))
            time_reg += bstate.time_regression_s
            time_newton += bstate.time_newton_s
        y0 = ensemble_mean(y)

    clamp_end = (problem.clamp_counter.events
                 if problem.clamp_counter is not None else 0)
    return RunReport(
        problem=problem.name, dim=problem.dim, horizon=problem.horizon,
        n_steps=config.n_steps, n_particles=config.n_particles,
        seed=config.seed, y0=y0,
        runtime_s=time.perf_counter() - t_total,
        time_forward_s=t_fwd, time_regression_s=time_reg,
        time_newton_s=time_newton,
        mean_cg_iters=cg_sum / max(cg_count, 1), max_cg_iters=cg_max,
        mean_newton_iters=newton_sum / max(newton_count, 1),
        max_newton_iters=newton_max,
        storage_mode=store.mode, storage_stride=store.stride,
        cg_nonconverged=cg_nonconv,
        clamp_events=clamp_end - clamp_start,
        params=dict(problem.params))
