"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, violated preconditions or malformed config files."""


class BoundaryTraceError(ValueError):
    """A two-sided trace quantity was requested on a boundary edge."""


class UnsupportedError(ValueError):
    """A combination of options the discretization does not support."""


class InvariantViolation(RuntimeError):
    """A computed object failed one of its structural invariants."""


class SolverError(RuntimeError):
    """A linear solve missed its residual tolerance."""

    def __init__(self, message, condition_estimate=None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class DomainError(ValueError):
    """Evaluation point outside the domain of a function."""
