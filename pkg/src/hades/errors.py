"""Shared exception types."""


class UsageError(ValueError):
    """Caller violated a documented precondition (dimension mismatch, bad argument)."""


class DegenerateBatchError(ValueError):
    """A batch or dataset whose sample weights are all zero."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite arithmetic is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(ValueError):
    """Experiment configuration failed schema validation."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path
