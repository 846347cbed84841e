"""Exception hierarchy shared by all modules."""


class BilevelError(Exception):
    """Base class for every error raised by this package."""


class InputError(BilevelError):
    """Problem data or user input is unusable (CLI exit code 2)."""


class InstanceSyntaxError(InputError):
    pass


class DimensionError(InputError):
    pass


class ProbabilityError(InputError):
    pass


class MeasureError(InputError):
    pass


class SolverError(BilevelError):
    """A numerical routine failed or the model violates an assumption (exit 1)."""


class NumericalError(SolverError):
    pass


class LowerInfeasible(SolverError):
    def __init__(self, message, scenario=None):
        super().__init__(message)
        self.scenario = scenario


class LowerUnbounded(SolverError):
    pass


class CapExceeded(SolverError):
    pass


class NoFeasibleBasis(SolverError):
    pass


class DomEmpty(SolverError):
    def __init__(self, message, condition):
        super().__init__(message)
        self.condition = condition


class UnsupportedMeasure(SolverError):
    pass


class NotDifferentiable(SolverError):
    pass


class SenseError(SolverError):
    pass


class RelaxedInfeasible(SolverError):
    pass


class OracleInfeasible(SolverError):
    pass


class OracleUnbounded(SolverError):
    pass
