"""Exception types raised across the package."""


class CycleRDMError(Exception):
    """Base class for all package errors."""


class ParameterError(CycleRDMError, ValueError):
    """An argument lies outside its documented domain."""


class ShapeError(CycleRDMError, ValueError):
    """Tensor shapes or channel counts do not match the contract."""


class OrderingError(ParameterError):
    """Timesteps given in the wrong order."""


class NumericalError(CycleRDMError, ArithmeticError):
    """A computation would be ill-conditioned or produced non-finite values."""
