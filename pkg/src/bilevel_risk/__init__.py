"""Risk-averse bilevel stochastic linear programs with finite scenario sets."""
from .errors import BilevelError, InputError, SolverError
from .model import CVaR, Expectation, ExpectedExcess, Instance, SemiDeviation, load_instance, parse_instance, parse_measure

__all__ = [
    "BilevelError", "InputError", "SolverError",
    "Instance", "load_instance", "parse_instance", "parse_measure",
    "Expectation", "ExpectedExcess", "SemiDeviation", "CVaR",
]
