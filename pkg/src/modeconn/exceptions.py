"""
Error types raised across the modeconn package.

Library code raises these; the command-line entry point catches them and turns
them into a non-zero exit status plus a JSON error document.
"""
from typing import Any, Optional


class ModeConnError(Exception):
    """Base class for all package errors."""

    field: Optional[str] = None


class InputShapeError(ModeConnError):
    """An input tensor does not match the shape a network or operation expects."""


class EmptyBatchError(ModeConnError):
    """A gradient or training call received no samples."""


class TrainingDivergedError(ModeConnError):
    """The training loss became NaN or infinite."""


class DegenerateChordError(ModeConnError):
    """The two endpoints of a barrier chord coincide."""


class OptimizationError(ModeConnError):
    """An input-space optimisation produced a non-finite objective."""


class NotConnectedError(ModeConnError):
    """
    Recursive refinement ran out of depth before the path became delta-connected.

    Attributes:
        path: The best piecewise-linear path found.
        curve: The loss curve sampled along that path.
    """

    def __init__(self, message: str, path: Any = None, curve: Any = None):
        super().__init__(message)
        self.path = path
        self.curve = curve


class ThresholdNotReachedError(ModeConnError):
    """
    An input optimisation finished without reaching its loss threshold.

    Attributes:
        best_input: The input with the lowest loss seen.
        best_loss: Its cross-entropy loss.
        iterations: Number of iterations performed.
    """

    def __init__(self, message: str, best_input: Any = None, best_loss: float = float("inf"),
                 iterations: int = 0):
        super().__init__(message)
        self.best_input = best_input
        self.best_loss = best_loss
        self.iterations = iterations


class MissingClassError(ModeConnError):
    """A class required by the operation has no examples."""


class DetectorNotFittedError(ModeConnError):
    """Prediction was requested from a detector that has not been fitted."""


class PowerIterationError(ModeConnError):
    """Power iteration did not converge within its iteration budget."""


class IdxFormatError(ModeConnError):
    """An IDX file is malformed. `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InsufficientDataError(ModeConnError):
    """Not enough low-loss examples to run an experiment protocol."""


class ConfigError(ModeConnError):
    """A configuration value is missing or invalid. `field` names it."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class UsageError(ModeConnError):
    """The command line could not be parsed. `field` names the offending flag or argument."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field
