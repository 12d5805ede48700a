"""Shared exception types."""


class SerForgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SerForgeError, ValueError):
    """Input data violates an operation's preconditions."""


class InvalidConfigError(SerForgeError, ValueError):
    """A configuration value is unusable."""


class InvalidShapeError(InvalidInputError):
    """Array shapes do not match an operation's contract."""


class TrainingDivergedError(SerForgeError, RuntimeError):
    """A non-finite loss or gradient was produced during training."""


class UndefinedRecallError(SerForgeError, ValueError):
    """A confusion-matrix row has zero support, so recall is undefined."""
