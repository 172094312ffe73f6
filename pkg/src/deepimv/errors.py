"""Exception types shared across the package."""


class DeepIMVError(Exception):
    """Base class for all package errors."""


class ShapeError(DeepIMVError, ValueError):
    """Array dimensions do not agree."""


class NumericError(DeepIMVError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ContractError(DeepIMVError, ValueError):
    """A precondition on the arguments was violated."""


class LoadError(DeepIMVError, ValueError):
    """A data file or checkpoint could not be parsed."""
