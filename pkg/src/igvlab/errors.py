"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN or Inf) appeared in a tensor."""

    def __init__(self, message, kind=None):
        super().__init__(message)
        self.kind = kind


class ShapeMismatchError(ContractError):
    """Stored parameters or data do not fit the shapes a model expects."""


class InterventionUnavailable(LookupError):
    """The memory bank holds no substitute from a foreign source."""
