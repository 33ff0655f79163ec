"""Numerical laboratory for turnpike phenomena in long-horizon optimal control."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    BoxConstraints,
    CostSpec,
    LinearDynamics,
    ProblemInstance,
    SpatialGrid,
    Trajectory,
    build_control_injection,
    build_laplacian_1d,
    heat_instance,
    simulate,
    step_implicit_euler,
)
from .ocp import SolveOptions, SolveResult, brute_force_oracle, gradient_via_adjoint, solve, solve_periodic  # noqa: E402
from .static import (  # noqa: E402
    StaticSolution,
    check_strict_strong_duality,
    solve_static_finite_dim,
    solve_static_lq,
    solve_static_semilinear,
)
from .dissipativity import (  # noqa: E402
    StorageFunction,
    SupplyRate,
    check_dissipation,
    estimate_dissipation_rate,
)
from .turnpike import TurnpikeSet, distance_to_set, fit_gap_rate, horizon_sweep, measure_Q_eps  # noqa: E402
