"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration or parameter value violates a documented constraint."""


class DataError(ValueError):
    """Input data is outside the domain an operation accepts."""


class NumericalFailure(RuntimeError):
    """An iterative routine exhausted its budget before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InvariantFailure(RuntimeError):
    """A hard run invariant (feasibility, sample accounting) was violated."""
