"""Exception hierarchy shared by every module."""


class QAdapterError(Exception):
    """Base class for all package errors."""


class DomainError(QAdapterError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class CapacityError(QAdapterError):
    """State enumeration would exceed the configured cap."""


class ConvergenceError(QAdapterError, RuntimeError):
    """An iterative solver ran out of iterations.

    Attributes:
        residual: sup-norm distance between the last two iterates.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class ParseError(QAdapterError, ValueError):
    """A serialized artifact could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(QAdapterError, ValueError):
    """Invalid configuration, including stale artifact fingerprints."""


class DivergenceError(QAdapterError, RuntimeError):
    """Training produced a non-finite or exploding loss.

    Attributes:
        trace: the loss values seen so far, including the offending one.
    """

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)
