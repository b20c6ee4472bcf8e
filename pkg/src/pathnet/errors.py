"""Exception types shared across the package.

The CLI maps these onto exit codes: validation/usage problems exit 2,
I/O problems exit 3 (plain ``OSError`` is used for those), and
computational failures exit 4.
"""


class PathnetError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PathnetError):
    """Operand shapes do not conform."""


class ValidationError(PathnetError):
    """Input violates a documented invariant (bad mask, cycle, range...)."""


class ParseError(PathnetError):
    """A file line could not be parsed; message carries the line number."""


class TrainingDivergedError(PathnetError):
    """Loss or a gradient went non-finite during training."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.step = step


class UndefinedMetricError(PathnetError):
    """A metric is undefined for the given labels (e.g. single-class AUC)."""


class DegenerateDataError(PathnetError):
    """Resampling could not produce usable data within the retry budget."""


class SearchFailedError(PathnetError):
    """Every hyperparameter draw failed to train."""
