"""Exception hierarchy shared by every module."""


class QdaedError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QdaedError, ValueError):
    pass


class ArgumentError(QdaedError, ValueError):
    pass


class StateError(QdaedError, RuntimeError):
    pass


class DataError(QdaedError):
    pass


class ConfigError(QdaedError, ValueError):
    pass


class FormatError(QdaedError):
    pass


class TrainingError(QdaedError, RuntimeError):
    """Raised when the loss becomes non-finite; carries where it happened."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class MetricUndefinedError(QdaedError, ValueError):
    pass


class CheckpointError(QdaedError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
