"""Exception hierarchy shared across the package."""


class ElastidError(Exception):
    """Base class for all package errors."""


class ValidationError(ElastidError, ValueError):
    """Invalid configuration or argument."""


class OutOfDomainError(ElastidError, ValueError):
    """A query point lies outside the computational domain."""


class NumericError(ElastidError, ArithmeticError):
    """Non-finite values or a failed numerical procedure."""


class NonConvergenceError(NumericError):
    """Newton iteration did not reach its tolerance.

    Attributes:
        residual_norm: last residual norm reached.
        t: time level of the failing step, if known.
    """

    def __init__(self, message, residual_norm=float("nan"), t=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.t = t


class LineSearchError(NumericError):
    """No step length satisfied the sufficient-decrease test."""


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SchemaError(ElastidError, ValueError):
    """A persisted file is malformed or misses required content."""
