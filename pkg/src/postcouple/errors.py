"""Exception and warning types.

Errors fall into three families that the command line maps to exit codes:
configuration problems, data problems, and numerical failures.
"""

from __future__ import annotations


class PostCoupleError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PostCoupleError):
    """Invalid run configuration."""


class DataError(PostCoupleError):
    """Problem with the input data."""


class SchemaError(DataError):
    """A required column is missing from the input table."""


class ParseError(DataError):
    """A cell could not be parsed as a number."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(DataError, ValueError):
    """A value lies outside its allowed domain."""


class PreconditionError(DataError, ValueError):
    """An operation was called on inputs that violate its preconditions."""


class NumericalError(PostCoupleError):
    """Base class for numerical and convergence failures."""


class RankDeficientError(NumericalError):
    """The design matrix does not have full column rank."""


class InfeasibleConstraintError(NumericalError):
    """No tilting parameter can zero the weighted moment (all moments share one sign)."""


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, last_lambda: float = float("nan"),
                 residual: float = float("nan"), history=None):
        super().__init__(message)
        self.last_lambda = last_lambda
        self.residual = residual
        self.history = list(history or [])


class StratumDegeneracyError(NumericalError):
    def __init__(self, message: str, stratum: int):
        super().__init__(message)
        self.stratum = stratum


class DegenerateReweightError(NumericalError):
    """All sensitivity weights collapsed; a narrower sensitivity prior is needed."""


class SelectionEmptyError(NumericalError):
    """No covariate passed the selection threshold."""


class PruneRefusalError(NumericalError):
    """Pruning would leave too few particles."""


class TooManyFailuresError(NumericalError):
    """Too many replications (or bootstrap replicates) failed."""


class DiagnosticWarning(UserWarning):
    """Sampler or tilting diagnostic (low acceptance, degenerate weights, ...)."""
