"""Exception and warning types shared across the package."""

from __future__ import annotations


class AgekinError(Exception):
    """Base class for all package errors."""


class DomainError(AgekinError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(AgekinError, ValueError):
    """A model or run configuration is invalid or unsupported."""


class IllConditionedStepError(AgekinError, ArithmeticError):
    """A renewal step has a near-singular diagonal coefficient."""


class MajorantViolationError(AgekinError, RuntimeError):
    """An observed hazard exceeded the thinning majorant."""


class ConvergenceError(AgekinError, ArithmeticError):
    """A quadrature or series failed to reach its tolerance."""

    def __init__(self, message: str, estimate: float | None = None, error: float | None = None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class NumericalWarning(UserWarning):
    """Emitted when a value saturates or a tolerance is narrowly missed."""


class TruncationWarning(NumericalWarning):
    """Emitted when probability mass leaks through a state-space truncation."""
