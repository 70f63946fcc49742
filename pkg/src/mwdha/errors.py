"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input fails a structural precondition (shape, symmetry, range)."""


class SingularityError(ArithmeticError):
    """A matrix that must be positive definite is (numerically) degenerate."""

    def __init__(self, message, eigenvalue=None, where=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.where = where


class ResourceLimitError(RuntimeError):
    """A requested mesh exceeds the configured cell budget."""


class UnsupportedError(ValueError):
    """Operation is not defined for the supplied dimension or kernel."""
