"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (see ``runner.cli``).
"""


class DistillError(Exception):
    """Base class for all package errors."""


class ConfigError(DistillError, ValueError):
    """Invalid configuration, schedule, or argument."""


class DataError(DistillError, ValueError):
    """Corrupt, inconsistent, or unusable data / checkpoint files."""


class ShapeError(DataError):
    """Array shapes do not satisfy an operation's contract."""


class NumericDivergence(DistillError, FloatingPointError):
    """A loss or model output became non-finite.

    ``state`` optionally carries the last finite parameter state so callers
    can persist it before exiting.
    """

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step
