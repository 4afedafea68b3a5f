class OccFieldError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(OccFieldError, ValueError):
    pass


class OutOfDomainError(OccFieldError, ValueError):
    pass


class ConfigurationError(OccFieldError):
    """Bad or inconsistent configuration (files, tables, fit configs)."""


class NumericalError(OccFieldError, FloatingPointError):
    """NaN/inf showed up where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
