"""Mode-conditioned reachability safety filter for a robot car sharing the road with a human driver."""

import os

# the TBB layer bundled with some numba builds is too old and warns on import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .dynamics import (ActionBounds, HumanAction, HumanState, RelativeState, RobotAction,  # noqa: E402
                       RobotState, VehicleParams, relative_derivative, relative_state, wrap_angle)
from .grid import Dim, Grid, GridSpec, TargetSpec, ValueField, build_grid, interpolate  # noqa: E402
from .modes import ModeSet, Trajectory, classify_action, classify_trajectory, cluster_modes  # noqa: E402
from .solver import BrtResult, SolverConfig, solve_brt, solve_curb_brt  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ActionBounds", "HumanAction", "HumanState", "RelativeState", "RobotAction", "RobotState",
    "VehicleParams", "relative_derivative", "relative_state", "wrap_angle", "Dim", "Grid", "GridSpec",
    "TargetSpec", "ValueField", "build_grid", "interpolate", "ModeSet", "Trajectory", "classify_action",
    "classify_trajectory", "cluster_modes", "BrtResult", "SolverConfig", "solve_brt", "solve_curb_brt",
]
