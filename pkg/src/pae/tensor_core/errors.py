"""Exception hierarchy shared by every module."""


class PaeError(Exception):
    """Base class for all package errors."""


class ShapeError(PaeError, ValueError):
    pass


class ConfigError(PaeError, ValueError):
    pass


class ContractError(PaeError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(PaeError, ArithmeticError):
    """Non-finite values, non-convergence, or degenerate inputs."""
