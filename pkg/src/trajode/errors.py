"""Exception hierarchy shared by every module."""


class TrajodeError(Exception):
    """Base class for package errors."""


class ContractError(TrajodeError, ValueError):
    """A caller violated an operation's preconditions."""


class ShapeError(ContractError):
    """Operand shapes do not conform to a primitive's shape rule."""


class NumericalError(TrajodeError, ArithmeticError):
    """A computation produced NaN or infinity."""


class DivergenceError(NumericalError):
    """An iterative procedure (solver, training) failed to stay bounded."""


class DataError(TrajodeError, ValueError):
    """Input files are malformed or inconsistent."""
