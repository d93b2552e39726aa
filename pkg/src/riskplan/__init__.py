"""Risk-aware trajectory planning on a bird's-eye-view grid.

Attention over BEV features yields per-vehicle risk maps, a linear decoder maps
them to quadratic cost weights, and an equality-constrained MPC with a
linearized bicycle model plans each vehicle.  The cost decoder is learned by
differentiating the plan through the KKT solve.
"""
from .errors import RiskPlanError
from .grid import GridSpec, Scenario, VehicleRecord
from .planner import PlannedTrajectory, plan

__version__ = "0.1.0"

__all__ = ["GridSpec", "PlannedTrajectory", "RiskPlanError", "Scenario", "VehicleRecord", "plan", "__version__"]
