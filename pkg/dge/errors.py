# dge/errors.py
# Purpose: exception hierarchy shared by the engine, the CLI and the HTTP routes.
# Every error also subclasses the closest builtin so callers may catch either.


class DgeError(Exception):
    """Base class for all errors raised by the dge package."""


class DimensionError(DgeError, ValueError):
    pass


class NumericError(DgeError, ArithmeticError):
    pass


class UsageError(DgeError, RuntimeError):
    pass


class ConfigError(DgeError, ValueError):
    pass


class CheckpointError(DgeError, ValueError):
    pass


class InvariantError(DgeError, AssertionError):
    pass


class ArtifactError(DgeError, OSError):
    """Raised when a report, CSV or heat-map cannot be written; message names the path."""


class TrainingAborted(DgeError, RuntimeError):
    def __init__(self, message: str, last_good: str | None = None):
        super().__init__(message)
        self.last_good = last_good
