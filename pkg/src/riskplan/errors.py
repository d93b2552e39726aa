"""Exception hierarchy shared by every module."""


class RiskPlanError(Exception):
    """Base class for all package errors."""


class ConfigError(RiskPlanError, ValueError):
    pass


class ShapeError(RiskPlanError, ValueError):
    pass


class NumericError(RiskPlanError, ArithmeticError):
    pass


class GeometryError(RiskPlanError, ValueError):
    pass


class OutOfGrid(RiskPlanError, IndexError):
    """A world position or cell index falls outside the BEV grid."""

    def __init__(self, axis: str, value: float, lo: float, hi: float):
        self.axis = axis
        self.value = value
        super().__init__(f"{axis}={value!r} outside grid range [{lo}, {hi}]")


class SingularKKT(RiskPlanError, ArithmeticError):
    def __init__(self, min_pivot: float):
        self.min_pivot = min_pivot
        super().__init__(f"KKT matrix is singular (smallest pivot {min_pivot:.3e})")


class InfeasibleConstraint(RiskPlanError):
    pass


class DivergenceError(RiskPlanError):
    def __init__(self, epoch: int, loss: float, last_stable_epoch: int):
        self.epoch = epoch
        self.loss = loss
        self.last_stable_epoch = last_stable_epoch
        super().__init__(
            f"loss {loss:.3e} at epoch {epoch} exceeded the divergence limit; "
            f"last stable epoch {last_stable_epoch}"
        )


class UndefinedMetric(RiskPlanError, ValueError):
    pass


class PlacementError(RiskPlanError):
    pass


class InsufficientHistory(RiskPlanError, ValueError):
    pass


class SuiteError(RiskPlanError):
    """Too many scenarios in an experiment suite failed."""
