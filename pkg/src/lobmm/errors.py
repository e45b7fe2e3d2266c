"""Exception types shared across the package.

The CLI maps these onto exit codes, so every module raises from this
hierarchy rather than bare ValueError/RuntimeError.
"""


class LobError(Exception):
    """Base class for all package errors."""


class ConfigError(LobError, ValueError):
    pass


class DataError(LobError, ValueError):
    pass


class FeedError(DataError):
    """Malformed feed input. Carries the 1-based line (or record) number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BookError(DataError):
    """A message is inconsistent with the current book state."""


class ShapeError(LobError, ValueError):
    pass


class CheckpointError(LobError):
    pass


class TrainingDiverged(LobError, FloatingPointError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
