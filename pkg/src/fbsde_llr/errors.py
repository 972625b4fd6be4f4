"""Exception taxonomy for the solver.

Every failure mode that user input or data can trigger gets its own class so
callers (and the CLI exit-code logic) can tell configuration mistakes apart
from numerical breakdowns.
"""

from __future__ import annotations


class FbsdeError(Exception):
    """Base class for all package errors."""


class UnknownProblemError(FbsdeError, KeyError):
    """Requested benchmark problem name is not registered."""


class InvalidParameterError(FbsdeError, ValueError):
    """A problem or solver parameter is out of its valid range."""


class ConfigError(FbsdeError, ValueError):
    """A run configuration (file or overrides) is malformed or inconsistent."""


class BlowupError(FbsdeError, FloatingPointError):
    """A simulated state or intermediate value became non-finite."""

    def __init__(self, message: str, particle: int | None = None,
                 level: int | None = None):
        super().__init__(message)
        self.particle = particle
        self.level = level


class DegenerateNeighborhoodError(FbsdeError, ValueError):
    """Kernel weights cannot be formed (zero bandwidth or all-zero weights)."""


class NewtonConvergenceError(FbsdeError, RuntimeError):
    """The scalar Newton closure failed to converge (or hit a flat Jacobian)."""

    def __init__(self, message: str, particle: int | None = None,
                 level: int | None = None, last_value: float | None = None,
                 last_residual: float | None = None):
        super().__init__(message)
        self.particle = particle
        self.level = level
        self.last_value = last_value
        self.last_residual = last_residual
