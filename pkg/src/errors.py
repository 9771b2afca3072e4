"""Exception hierarchy shared by every module.

Each error also derives from the builtin a caller would naturally catch, so
``except ValueError`` keeps working for code that does not know about us.
"""


class DisentangleError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DisentangleError, ValueError):
    """Tensor or network widths do not line up."""


class NonFiniteError(DisentangleError, FloatingPointError):
    """A NaN or Inf reached a tensor, a loss or an optimizer step."""


class GraphError(DisentangleError, RuntimeError):
    """Misuse of a computation graph (reused graph, non-scalar loss, ...)."""


class CheckpointError(DisentangleError, ValueError):
    """A checkpoint file is malformed; the message names the failing field."""


class DataFormatError(DisentangleError, ValueError):
    """An input file could not be parsed; the message names file and line."""


class ConfigError(DisentangleError, ValueError):
    """Invalid run configuration."""


class FrozenParameterError(DisentangleError, RuntimeError):
    """Parameters that must stay frozen were modified."""


class InsufficientDataError(DisentangleError, ValueError):
    """Not enough samples, classes, periods or history for the request."""


class TrainingError(DisentangleError, RuntimeError):
    """Training aborted; ``history`` holds everything logged up to the failure."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history
