"""Exception hierarchy.

``ValidationError`` covers bad inputs (CLI exit code 2); ``NumericalError``
and its subclasses cover failures of the numerics themselves (exit code 3).
"""


class LowRankError(Exception):
    """Base class for all package errors."""


class ValidationError(LowRankError, ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericalError(LowRankError, ArithmeticError):
    """A numerical procedure failed."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap without converging."""


class IllPosedError(NumericalError):
    """A linear system that must be solved is singular."""


class DegenerateCovarianceError(NumericalError):
    """The estimated covariance cannot support the requested quantity."""
