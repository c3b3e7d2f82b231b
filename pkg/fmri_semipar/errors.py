"""Exception hierarchy for fmri_semipar."""

from __future__ import annotations


class FmriSemiparError(Exception):
    """Base class for all package errors."""


class InputFormatError(FmriSemiparError, ValueError):
    """Raised when inputs violate a documented precondition or file format."""


class InvalidStimulusError(InputFormatError):
    """Raised when a stimulus train holds values other than 0 or 1."""


class InvalidDimensionError(InputFormatError):
    """Raised when lengths, run sizes or decimation factors are inconsistent."""


class DimensionMismatchError(InputFormatError):
    """Raised when operands have incompatible shapes."""


class InvalidRegionError(InputFormatError):
    """Raised when synthetic brain regions are malformed or conflict."""


class InconsistentConfigError(InputFormatError):
    """Raised when a simulation configuration cannot be realised."""


class NumericalError(FmriSemiparError, ArithmeticError):
    """Base class for numerical failures."""


class SingularWindowError(NumericalError):
    """Raised when a local linear window cannot be solved."""


class NoValidBandwidthError(NumericalError):
    """Raised when every candidate bandwidth fails."""


class InfeasibleCovarianceError(NumericalError):
    """Raised when solved autocovariances are not a valid covariance."""


class NotPositiveDefiniteError(NumericalError):
    """Raised when a banded correlation matrix has no Cholesky factor."""


class IllPosedDesignError(NumericalError):
    """Raised when the GLS Gram matrix is singular or badly conditioned."""


class IllPosedHypothesisError(NumericalError):
    """Raised when A (S'R^-1S)^-1 A' cannot be inverted."""


class InvalidHypothesisError(NumericalError):
    """Raised when a hypothesis matrix is not of full row rank."""


class InsufficientDataError(NumericalError):
    """Raised when there are not more observations than parameters."""
