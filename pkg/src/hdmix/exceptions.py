"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition (non-finite
    entries, dimension mismatches, out-of-range parameters)."""


class DegenerateDesignError(RuntimeError):
    """Raised when the precision-surrogate program stays infeasible for a
    coordinate after all slack doublings."""

    def __init__(self, coordinate, message=None):
        self.coordinate = coordinate
        super().__init__(message or f"surrogate program infeasible at coordinate {coordinate}")


class ConstructionError(RuntimeError):
    """Raised when a deterministic construction fails an internal check
    (e.g. a covariance template that is not positive definite)."""
