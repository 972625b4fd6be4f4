"""Benchmark problem definitions.

A problem bundles everything the solver needs about the PDE

    u_t + (1/2) Tr[sigma sigma^T Hess u] + mu . grad u + f(t, x, u, sigma^T grad u) = 0,
    u(T, x) = g(x),

namely the spatial dimension, horizon, query point, drift ``mu``, diffusion
``sigma`` (constant in ``(t, x)``), driver ``f``, terminal condition ``g``,
and — when available — the exact solution used for error reporting and
gradient diagnostics.

All problem callables are vectorized: ``x`` may be a single point ``(d,)`` or
a batch ``(M, d)``; scalar-field outputs follow (``()`` or ``(M,)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidParameterError, UnknownProblemError

DENSE_DIFFUSION_MAX_DIM = 64


# ---------------------------------------------------------------------------
# Diffusion specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Isotropic:
    """sigma = c * I."""

    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise InvalidParameterError(
                f"isotropic diffusion coefficient must be finite and > 0, "
                f"got {self.c}")


@dataclass(frozen=True)
class Diagonal:
    """sigma = diag(values)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise InvalidParameterError(
                f"diagonal diffusion needs a 1-d coefficient vector, "
                f"got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise InvalidParameterError(
                "diagonal diffusion coefficients must be finite and > 0")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class DenseSmall:
    """Full d x d matrix sigma, restricted to small d."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidParameterError(
                f"dense diffusion must be a square matrix, got shape {m.shape}")
        if m.shape[0] > DENSE_DIFFUSION_MAX_DIM:
            raise InvalidParameterError(
                f"dense diffusion is limited to d <= {DENSE_DIFFUSION_MAX_DIM}, "
                f"got d = {m.shape[0]}; use Isotropic or Diagonal instead")
        if not np.all(np.isfinite(m)):
            raise InvalidParameterError("dense diffusion must be finite")
        object.__setattr__(self, "matrix", m)


Diffusion = Isotropic | Diagonal | DenseSmall


def apply_diffusion(spec: Diffusion, w: np.ndarray) -> np.ndarray:
    """sigma @ w for each row of w ((..., d))."""
    if isinstance(spec, Isotropic):
        return spec.c * w
    if isinstance(spec, Diagonal):
        return spec.values * w
    if isinstance(spec, DenseSmall):
        return w @ spec.matrix.T
    raise InvalidParameterError(f"unknown diffusion spec {type(spec).__name__}")


def apply_diffusion_transpose(spec: Diffusion, w: np.ndarray) -> np.ndarray:
    """sigma^T @ w for each row of w ((..., d))."""
    if isinstance(spec, Isotropic):
        return spec.c * w
    if isinstance(spec, Diagonal):
        return spec.values * w
    if isinstance(spec, DenseSmall):
        return w @ spec.matrix
    raise InvalidParameterError(f"unknown diffusion spec {type(spec).__name__}")


def diffusion_as_dense(spec: Diffusion, dim: int) -> np.ndarray:
    """Materialize sigma as a (dim, dim) matrix (for oracles and small d)."""
    if isinstance(spec, Isotropic):
        return spec.c * np.eye(dim)
    if isinstance(spec, Diagonal):
        if spec.values.shape[0] != dim:
            raise InvalidParameterError(
                f"diagonal diffusion has {spec.values.shape[0]} entries, "
                f"problem dimension is {dim}")
        return np.diag(spec.values)
    if isinstance(spec, DenseSmall):
        if spec.matrix.shape[0] != dim:
            raise InvalidParameterError(
                f"dense diffusion is {spec.matrix.shape[0]}x"
                f"{spec.matrix.shape[1]}, problem dimension is {dim}")
        return spec.matrix.copy()
    raise InvalidParameterError(f"unknown diffusion spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------

@dataclass
class ExactSolution:
    """Closed-form solution attached to a problem.

    ``u`` and ``grad_u`` are required; ``du_dt`` and ``laplacian_u`` are only
    needed when the problem's source term is manufactured from the solution.
    """

    u: Callable[[float, np.ndarray], np.ndarray]
    grad_u: Callable[[float, np.ndarray], np.ndarray]
    du_dt: Callable[[float, np.ndarray], np.ndarray] | None = None
    laplacian_u: Callable[[float, np.ndarray], np.ndarray] | None = None


@dataclass
class ClampCounter:
    """Mutable counter for argument clamps inside a driver."""

    events: int = 0


@dataclass
class ProblemSpec:
    name: str
    dim: int
    horizon: float
    query_point: np.ndarray
    diffusion: Diffusion
    driver: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    drift: Callable[[float, np.ndarray], np.ndarray] | None = None
    driver_dy: Callable[[float, np.ndarray, np.ndarray, np.ndarray],
                        np.ndarray] | None = None
    exact: ExactSolution | None = None
    params: dict = field(default_factory=dict)
    clamp_counter: ClampCounter | None = None


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise InvalidParameterError(f"x must be (d,) or (M, d), got shape {x.shape}")


def _squeeze(out: np.ndarray, single: bool) -> np.ndarray:
    return out[0] if single else out


def _sigmoid(w: np.ndarray) -> np.ndarray:
    # overflow-safe logistic
    out = np.empty_like(w, dtype=float)
    pos = w >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-w[pos]))
    ew = np.exp(w[~pos])
    out[~pos] = ew / (1.0 + ew)
    return out


def _check_dim(dim) -> int:
    if not isinstance(dim, (int, np.integer)) or isinstance(dim, bool):
        raise InvalidParameterError(f"dimension must be an int, got {dim!r}")
    if dim < 1:
        raise InvalidParameterError(f"dimension must be >= 1, got {dim}")
    return int(dim)


def _check_horizon(horizon: float) -> float:
    horizon = float(horizon)
    if not (math.isfinite(horizon) and horizon > 0):
        raise InvalidParameterError(
            f"horizon T must be finite and > 0, got {horizon}")
    return horizon


def _check_params(name: str, params: dict, allowed: tuple[str, ...]) -> None:
    for key in params:
        if key not in allowed:
            raise InvalidParameterError(
                f"problem {name!r} does not accept parameter {key!r}; "
                f"allowed: {sorted(allowed)}")


# ---------------------------------------------------------------------------
# Manufactured source
# ---------------------------------------------------------------------------

def manufactured_source(
    exact: ExactSolution,
    diffusion: Diffusion,
    drift: Callable[[float, np.ndarray], np.ndarray] | None,
    nonlinearity: Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> Callable[[float, np.ndarray], np.ndarray]:
    """Source term that makes ``exact`` solve the PDE with this nonlinearity.

    For u_t + L u + N(u, grad u) + source = 0 with generator
    L = (c^2 / 2) Lap + mu . grad, the source is
    source(t, x) = -(u_t + L u) - N(u, grad u). Requires ``exact.du_dt`` and
    ``exact.laplacian_u``; only isotropic diffusion is supported (a general
    sigma would need the full Hessian of u, which ExactSolution does not
    carry).
    """
    if exact.du_dt is None or exact.laplacian_u is None:
        raise InvalidParameterError(
            "manufactured source needs exact.du_dt and exact.laplacian_u")
    if not isinstance(diffusion, Isotropic):
        raise InvalidParameterError(
            "manufactured source supports isotropic diffusion only")
    half_c2 = 0.5 * diffusion.c ** 2

    def source(t: float, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        ut = exact.du_dt(t, xb)
        lap = exact.laplacian_u(t, xb)
        lu = half_c2 * lap
        grad = exact.grad_u(t, xb)
        if drift is not None:
            lu = lu + np.sum(drift(t, xb) * grad, axis=1)
        nl = nonlinearity(exact.u(t, xb), grad)
        return _squeeze(-(ut + lu) - nl, single)

    return source


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------

def _make_allen_cahn_dw(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("allen_cahn_dw", params, ())
    t_end = _check_horizon(0.3 if horizon is None else horizon)

    def driver(t, x, y, z):
        return y - y ** 3

    def driver_dy(t, x, y, z):
        return 1.0 - 3.0 * y ** 2

    def terminal(x):
        xb, single = _as_batch(x)
        return _squeeze(1.0 / (2.0 + 0.4 * np.sum(xb ** 2, axis=1)), single)

    return ProblemSpec(
        name="allen_cahn_dw", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=Isotropic(math.sqrt(2.0)),
        driver=driver, driver_dy=driver_dy, terminal=terminal,
        params={})


def _prod_partials(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P = prod_j x_j and P_i = prod_{j != i} x_j for each row, zero-safe."""
    m, d = x.shape
    if d == 1:
        return x[:, 0].copy(), np.ones_like(x)
    zeros = x == 0.0
    nzero = zeros.sum(axis=1)
    prod_all = np.prod(x, axis=1)
    # product of the nonzero entries only
    x_masked = np.where(zeros, 1.0, x)
    prod_nonzero = np.prod(x_masked, axis=1)
    partials = np.zeros_like(x)
    clean = nzero == 0
    if np.any(clean):
        partials[clean] = prod_all[clean, None] / x[clean]
    one = nzero == 1
    if np.any(one):
        partials[one] = np.where(zeros[one], prod_nonzero[one, None], 0.0)
    # rows with >= 2 zeros keep all-zero partials
    return prod_all, partials


def _make_allen_cahn_log(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("allen_cahn_log", params, ("theta", "theta_c"))
    theta = float(params.get("theta", 1.0))
    theta_c = float(params.get("theta_c", 2.0))
    if theta <= 0:
        raise InvalidParameterError(f"theta must be > 0, got {theta}")
    if theta >= theta_c:
        raise InvalidParameterError(
            f"theta must be < theta_c, got theta={theta}, theta_c={theta_c}")
    t_end = _check_horizon(1.0 if horizon is None else horizon)
    clamps = ClampCounter()

    def u(t, x):
        xb, single = _as_batch(x)
        p, _ = _prod_partials(xb)
        env = np.exp(math.cos(t) - np.sum(xb ** 2, axis=1))
        return _squeeze(np.cos(p) * env, single)

    def grad_u(t, x):
        xb, single = _as_batch(x)
        p, partials = _prod_partials(xb)
        env = np.exp(math.cos(t) - np.sum(xb ** 2, axis=1))
        g = env[:, None] * (-np.sin(p)[:, None] * partials
                            - 2.0 * xb * np.cos(p)[:, None])
        return _squeeze(g, single)

    def du_dt(t, x):
        xb, single = _as_batch(x)
        p, _ = _prod_partials(xb)
        env = np.exp(math.cos(t) - np.sum(xb ** 2, axis=1))
        return _squeeze(-math.sin(t) * np.cos(p) * env, single)

    def laplacian_u(t, x):
        xb, single = _as_batch(x)
        p, partials = _prod_partials(xb)
        r2 = np.sum(xb ** 2, axis=1)
        env = np.exp(math.cos(t) - r2)
        cosp, sinp = np.cos(p), np.sin(p)
        sum_pi2 = np.sum(partials ** 2, axis=1)
        # sum_i x_i * P_i = d * P identically
        lap = env * (-cosp * sum_pi2 + 4.0 * xb.shape[1] * p * sinp
                     + cosp * (4.0 * r2 - 2.0 * xb.shape[1]))
        return _squeeze(lap, single)

    exact = ExactSolution(u=u, grad_u=grad_u, du_dt=du_dt,
                          laplacian_u=laplacian_u)

    def f_nl(y: np.ndarray, grad: np.ndarray | None = None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        am = np.abs(1.0 - y)
        ap = np.abs(1.0 + y)
        bad = (am < 1e-12) | (ap < 1e-12)
        if np.any(bad):
            clamps.events += int(np.count_nonzero(bad))
            am = np.maximum(am, 1e-12)
            ap = np.maximum(ap, 1e-12)
        return 0.5 * theta * (np.log(ap) - np.log(am)) - theta_c * y

    diffusion = Isotropic(math.sqrt(2.0))
    source = manufactured_source(exact, diffusion, None,
                                 lambda uu, gg: f_nl(uu))

    def driver(t, x, y, z):
        return f_nl(y) + source(t, x)

    def driver_dy(t, x, y, z):
        denom = 1.0 - np.asarray(y, dtype=float) ** 2
        denom = np.where(np.abs(denom) < 1e-12,
                         np.where(denom < 0, -1e-12, 1e-12), denom)
        return theta / denom - theta_c

    def terminal(x):
        return u(t_end, x)

    return ProblemSpec(
        name="allen_cahn_log", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=diffusion,
        driver=driver, driver_dy=driver_dy, terminal=terminal,
        exact=exact, params={"theta": theta, "theta_c": theta_c},
        clamp_counter=clamps)


def _make_burgers(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("burgers", params, ("nu",))
    nu = float(params.get("nu", 1.0 / dim))
    if not (math.isfinite(nu) and nu > 0):
        raise InvalidParameterError(f"nu must be finite and > 0, got {nu}")
    t_end = _check_horizon(0.3 if horizon is None else horizon)
    c = dim * math.sqrt(nu)
    b_const = 0.5 + 1.0 / (dim * nu)
    sqrt_nu = math.sqrt(nu)

    def wave(t, xb):
        return t + np.sum(xb, axis=1) / xb.shape[1]

    def u(t, x):
        xb, single = _as_batch(x)
        return _squeeze(_sigmoid(wave(t, xb)), single)

    def grad_u(t, x):
        xb, single = _as_batch(x)
        s = _sigmoid(wave(t, xb))
        sp = s * (1.0 - s)
        g = np.broadcast_to((sp / xb.shape[1])[:, None], xb.shape).copy()
        return _squeeze(g, single)

    def du_dt(t, x):
        xb, single = _as_batch(x)
        s = _sigmoid(wave(t, xb))
        return _squeeze(s * (1.0 - s), single)

    def laplacian_u(t, x):
        xb, single = _as_batch(x)
        s = _sigmoid(wave(t, xb))
        spp = s * (1.0 - s) * (1.0 - 2.0 * s)
        return _squeeze(spp / xb.shape[1], single)

    def driver(t, x, y, z):
        return sqrt_nu * (y - b_const) * np.sum(z, axis=-1)

    def driver_dy(t, x, y, z):
        return sqrt_nu * np.sum(z, axis=-1)

    def terminal(x):
        return u(t_end, x)

    return ProblemSpec(
        name="burgers", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=Isotropic(c),
        driver=driver, driver_dy=driver_dy, terminal=terminal,
        exact=ExactSolution(u=u, grad_u=grad_u, du_dt=du_dt,
                            laplacian_u=laplacian_u),
        params={"nu": nu})


def _make_hj_gradient_sink(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("hj_gradient_sink", params, ("kappa",))
    kappa = float(params.get("kappa", 0.1))
    if not (math.isfinite(kappa) and kappa >= 0):
        raise InvalidParameterError(
            f"kappa must be finite and >= 0, got {kappa}")
    t_end = _check_horizon(0.5 if horizon is None else horizon)

    def u(t, x):
        xb, single = _as_batch(x)
        s = 1.0 + 4.0 * t
        r2 = np.sum(xb ** 2, axis=1)
        return _squeeze(s ** (-0.5 * xb.shape[1]) * np.exp(-r2 / s), single)

    def grad_u(t, x):
        xb, single = _as_batch(x)
        s = 1.0 + 4.0 * t
        r2 = np.sum(xb ** 2, axis=1)
        val = s ** (-0.5 * xb.shape[1]) * np.exp(-r2 / s)
        return _squeeze(val[:, None] * (-2.0 * xb / s), single)

    def du_dt(t, x):
        xb, single = _as_batch(x)
        s = 1.0 + 4.0 * t
        r2 = np.sum(xb ** 2, axis=1)
        val = s ** (-0.5 * xb.shape[1]) * np.exp(-r2 / s)
        return _squeeze(val * (-2.0 * xb.shape[1] / s + 4.0 * r2 / s ** 2),
                        single)

    def laplacian_u(t, x):
        # u solves the heat equation u_t = Lap u, so the Laplacian equals du_dt
        return du_dt(t, x)

    exact = ExactSolution(u=u, grad_u=grad_u, du_dt=du_dt,
                          laplacian_u=laplacian_u)
    diffusion = Isotropic(math.sqrt(2.0))
    source = manufactured_source(
        exact, diffusion, None,
        lambda uu, gg: -kappa * uu * np.sum(gg ** 2, axis=1))

    def driver(t, x, y, z):
        return source(t, x) - 0.5 * kappa * y * np.sum(
            np.asarray(z, dtype=float) ** 2, axis=-1)

    def driver_dy(t, x, y, z):
        return -0.5 * kappa * np.sum(np.asarray(z, dtype=float) ** 2, axis=-1)

    def terminal(x):
        return u(t_end, x)

    return ProblemSpec(
        name="hj_gradient_sink", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=diffusion,
        driver=driver, driver_dy=driver_dy, terminal=terminal,
        exact=exact, params={"kappa": kappa})


def _make_linear_heat(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("linear_heat", params, ("sigma", "gaussian_a"))
    c = float(params.get("sigma", 1.0))
    a = float(params.get("gaussian_a", 0.5))
    if not (math.isfinite(c) and c > 0):
        raise InvalidParameterError(f"sigma must be finite and > 0, got {c}")
    if not (math.isfinite(a) and a > 0):
        raise InvalidParameterError(
            f"gaussian_a must be finite and > 0, got {a}")
    t_end = _check_horizon(1.0 if horizon is None else horizon)

    def u(t, x):
        xb, single = _as_batch(x)
        s = 1.0 + 2.0 * a * c ** 2 * (t_end - t)
        r2 = np.sum(xb ** 2, axis=1)
        return _squeeze(s ** (-0.5 * xb.shape[1]) * np.exp(-a * r2 / s), single)

    def grad_u(t, x):
        xb, single = _as_batch(x)
        s = 1.0 + 2.0 * a * c ** 2 * (t_end - t)
        r2 = np.sum(xb ** 2, axis=1)
        val = s ** (-0.5 * xb.shape[1]) * np.exp(-a * r2 / s)
        return _squeeze(val[:, None] * (-2.0 * a * xb / s), single)

    def driver(t, x, y, z):
        return np.zeros(np.shape(y))

    def driver_dy(t, x, y, z):
        return np.zeros(np.shape(y))

    def terminal(x):
        xb, single = _as_batch(x)
        return _squeeze(np.exp(-a * np.sum(xb ** 2, axis=1)), single)

    return ProblemSpec(
        name="linear_heat", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=Isotropic(c),
        driver=driver, driver_dy=driver_dy, terminal=terminal,
        exact=ExactSolution(u=u, grad_u=grad_u),
        params={"sigma": c, "gaussian_a": a})


def _make_affine_test(dim: int, horizon: float | None, params: dict) -> ProblemSpec:
    _check_params("affine_test", params, ("a", "b"))
    a = params.get("a", 1.0)
    b = float(params.get("b", 0.0))
    a_vec = (np.full(dim, float(a)) if np.ndim(a) == 0
             else np.asarray(a, dtype=float))
    if a_vec.shape != (dim,):
        raise InvalidParameterError(
            f"affine coefficient a has shape {a_vec.shape}, expected ({dim},)")
    if not np.all(np.isfinite(a_vec)) or not math.isfinite(b):
        raise InvalidParameterError("affine coefficients must be finite")
    t_end = _check_horizon(1.0 if horizon is None else horizon)

    def u(t, x):
        xb, single = _as_batch(x)
        return _squeeze(xb @ a_vec + b, single)

    def grad_u(t, x):
        xb, single = _as_batch(x)
        return _squeeze(np.broadcast_to(a_vec, xb.shape).copy(), single)

    def driver(t, x, y, z):
        return np.zeros(np.shape(y))

    def driver_dy(t, x, y, z):
        return np.zeros(np.shape(y))

    return ProblemSpec(
        name="affine_test", dim=dim, horizon=t_end,
        query_point=np.zeros(dim), diffusion=Isotropic(1.0),
        driver=driver, driver_dy=driver_dy, terminal=lambda x: u(t_end, x),
        exact=ExactSolution(u=u, grad_u=grad_u),
        params={"a": a_vec, "b": b})


BUILTIN_PROBLEMS = {
    "allen_cahn_dw": _make_allen_cahn_dw,
    "allen_cahn_log": _make_allen_cahn_log,
    "burgers": _make_burgers,
    "hj_gradient_sink": _make_hj_gradient_sink,
    "linear_heat": _make_linear_heat,
    "affine_test": _make_affine_test,
}


def builtin_problem(name: str, dim: int, horizon: float | None = None,
                    params: dict | None = None) -> ProblemSpec:
    """Construct a registered benchmark problem.

    Raises UnknownProblemError for unregistered names and
    InvalidParameterError for out-of-range dimensions, horizons, or
    problem parameters.
    """
    if name not in BUILTIN_PROBLEMS:
        raise UnknownProblemError(
            f"unknown problem {name!r}; available: "
            f"{sorted(BUILTIN_PROBLEMS)}")
    dim = _check_dim(dim)
    return BUILTIN_PROBLEMS[name](dim, horizon, dict(params or {}))
