"""Exception types raised across the package."""


class DmlError(Exception):
    """Base class for all package errors."""


class ConfigError(DmlError, ValueError):
    pass


class DomainError(DmlError, ValueError):
    pass


class FitError(DmlError):
    pass


class NumericError(DmlError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class StateError(DmlError, RuntimeError):
    pass


class TrainingError(DmlError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BacktestError(DmlError):
    def __init__(self, message, method=None, date=None):
        super().__init__(message)
        self.method = method
        self.date = date


class MethodError(DmlError):
    """Training failure tagged with the method that raised it."""

    def __init__(self, message, method=None):
        super().__init__(message)
        self.method = method
