"""Exception hierarchy shared by every module.

Every error raised deliberately by the library derives from :class:`RapError`,
which lets the CLI map them to exit code 1 with a one-line diagnostic.
"""

from __future__ import annotations


class RapError(Exception):
    """Base class for library errors."""


class DomainError(RapError, ValueError):
    """An argument lies outside the operation's domain."""


class ShapeError(RapError, ValueError):
    """Array shapes or dimensions are inconsistent."""


class IndexOutOfRangeError(RapError, IndexError):
    """An index (window, channel, marker) is out of range."""


class ConfigurationError(RapError, ValueError):
    """A configuration or data partition is unusable."""


class IncompatibleTaskError(ConfigurationError):
    """Online task requirements cannot be met by the pooling geometry."""


class IncompatiblePlanError(ConfigurationError):
    """A pooling plan does not fit the model it is applied to."""


class ParseError(RapError, ValueError):
    """A file or manifest could not be parsed."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


class NumericalError(RapError, ArithmeticError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message if residual is None else f"{message} (residual={residual:.3e})")
        self.residual = residual


class ConvergenceError(NumericalError):
    """Iteration cap reached before the tolerance was met."""


class DegenerateMatrixError(RapError, ArithmeticError):
    """A matrix that must be positive definite is not."""


class InvalidStateError(RapError, RuntimeError):
    """An object is used in a state that does not permit the call."""


class TrainingDivergedError(RapError, ArithmeticError):
    """A non-finite gradient or loss appeared during optimization."""


class DegenerateTestError(RapError, ValueError):
    """A statistical test is undefined for the given data."""
