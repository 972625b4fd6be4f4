"""Solver for high-dimensional semilinear parabolic PDEs.

Simulates decoupled forward particle paths with Euler-Maruyama, then walks
backward through time estimating the solution value and its diffusion-scaled
gradient by kernel-weighted local linear regression, closing each step with
a scalar Newton solve on the implicit driver term.
"""

from .backward import RunReport, backward_step, ensemble_mean, newton_solve_y, run
from .config import SolverConfig
from .errors import (
    BlowupError,
    ConfigError,
    DegenerateNeighborhoodError,
    FbsdeError,
    InvalidParameterError,
    NewtonConvergenceError,
    UnknownProblemError,
)
from .forward import (
    LevelState,
    PathStore,
    RngStreamKey,
    dump_level,
    gaussian_block,
    iter_levels_backward,
    plan_storage,
    read_level_dump,
    restore_level,
    simulate_paths,
    step_level,
)
from .harness import (
    ScalingReport,
    SweepPlan,
    SweepResult,
    fit_slope,
    reference_value,
    reproduce_plan,
    run_sweep,
    scaling_report,
)
from .model import (
    DenseSmall,
    Diagonal,
    ExactSolution,
    Isotropic,
    ProblemSpec,
    apply_diffusion,
    apply_diffusion_transpose,
    builtin_problem,
    manufactured_source,
)
from .regress import (
    RegressionOutput,
    bandwidth,
    bandwidth_from_distances,
    compute_weights,
    weights_from_distances,
    estimate_gradient,
    kernel_value,
    normal_operator_apply,
    pairwise_distances,
    solve_wls,
)

__version__ = "0.1.0"

__all__ = [
    "BlowupError",
    "ConfigError",
    "DegenerateNeighborhoodError",
    "DenseSmall",
    "Diagonal",
    "ExactSolution",
    "FbsdeError",
    "InvalidParameterError",
    "Isotropic",
    "LevelState",
    "NewtonConvergenceError",
    "PathStore",
    "ProblemSpec",
    "RegressionOutput",
    "RngStreamKey",
    "RunReport",
    "ScalingReport",
    "SolverConfig",
    "SweepPlan",
    "SweepResult",
    "UnknownProblemError",
    "apply_diffusion",
    "apply_diffusion_transpose",
    "backward_step",
    "bandwidth",
    "bandwidth_from_distances",
    "builtin_problem",
    "compute_weights",
    "weights_from_distances",
    "dump_level",
    "ensemble_mean",
    "estimate_gradient",
    "fit_slope",
    "gaussian_block",
    "iter_levels_backward",
    "kernel_value",
    "manufactured_source",
    "newton_solve_y",
    "normal_operator_apply",
    "pairwise_distances",
    "plan_storage",
    "read_level_dump",
    "reference_value",
    "reproduce_plan",
    "restore_level",
    "run",
    "run_sweep",
    "scaling_report",
    "simulate_paths",
    "solve_wls",
    "step_level",
]
