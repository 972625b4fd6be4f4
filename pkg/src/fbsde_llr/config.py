"""Solver configuration shared by the library and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError

KERNELS = ("gaussian", "epanechnikov")
BANDWIDTH_RULES = ("max_distance", "scaled_sqrt_dt", "fixed")


@dataclass
class SolverConfig:
    """Numerical parameters of one solver run.

    ``ridge_lambda`` is either the string ``"auto"`` (per-anchor scaling
    1e-8 * sum_j w_j ||D_j||^2 / d) or an explicit float >= 0.
    ``cg_maxiter`` is either ``"auto"`` (min(10 * (d + 1), 2000)) or an int.
    ``bandwidth_c`` is the constant of the scaled_sqrt_dt rule (eps = c
    sqrt(dt)) and the literal bandwidth of the fixed rule.
    """

    n_steps: int = 1000
    n_particles: int = 100
    seed: int = 42
    kernel: str = "gaussian"
    bandwidth_rule: str = "max_distance"
    bandwidth_c: float = 1.0
    ridge_lambda: float | str = "auto"
    cg_tol: float = 1e-10
    cg_maxiter: int | str = "auto"
    newton_tol: float = 1e-12
    newton_maxiter: int = 50
    memory_budget_mb: float = 4096.0
    extra: dict = field(default_factory=dict)

    def validate(self, dim: int | None = None) -> None:
        if self.n_steps < 1:
            raise ConfigError(f"N must be >= 1, got {self.n_steps}")
        if self.n_particles < 1:
            raise ConfigError(f"M must be >= 1, got {self.n_particles}")
        if self.kernel not in KERNELS:
            raise ConfigError(
                f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.bandwidth_rule not in BANDWIDTH_RULES:
            raise ConfigError(
                f"unknown bandwidth_rule {self.bandwidth_rule!r}; "
                f"expected one of {BANDWIDTH_RULES}")
        if self.bandwidth_c <= 0:
            raise ConfigError(f"bandwidth_c must be > 0, got {self.bandwidth_c}")
        if isinstance(self.ridge_lambda, str):
            if self.ridge_lambda != "auto":
                raise ConfigError(
                    f"ridge_lambda must be 'auto' or a float >= 0, "
                    f"got {self.ridge_lambda!r}")
        elif self.ridge_lambda < 0:
            raise ConfigError(
                f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if dim is not None and self.n_particles <= dim + 1 \
                and self.ridge_lambda == 0:
            raise ConfigError("ridge required when M <= d+1")
        if not (0 < self.cg_tol < 1):
            raise ConfigError(f"cg_tol must be in (0, 1), got {self.cg_tol}")
        if isinstance(self.cg_maxiter, str):
            if self.cg_maxiter != "auto":
                raise ConfigError(
                    f"cg_maxiter must be 'auto' or a positive int, "
                    f"got {self.cg_maxiter!r}")
        elif self.cg_maxiter < 1:
            raise ConfigError(
                f"cg_maxiter must be >= 1, got {self.cg_maxiter}")
        if self.newton_tol <= 0:
            raise ConfigError(f"newton_tol must be > 0, got {self.newton_tol}")
        if self.newton_maxiter < 1:
            raise ConfigError(
                f"newton_maxiter must be >= 1, got {self.newton_maxiter}")
        if self.memory_budget_mb <= 0:
            raise ConfigError(
                f"memory_budget_mb must be > 0, got {self.memory_budget_mb}")

    def resolved_cg_maxiter(self, dim: int) -> int:
        if self.cg_maxiter == "auto":
            return min(10 * (dim + 1), 2000)
        return int(self.cg_maxiter)

    def with_updates(self, **kwargs) -> "SolverConfig":
        return replace(self, **kwargs)
