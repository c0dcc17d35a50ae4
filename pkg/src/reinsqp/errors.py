"""Exception types shared across the package."""

from __future__ import annotations


class ReinsqpError(Exception):
    """Base class for all package errors."""


class InputError(ReinsqpError):
    """Malformed or inconsistent input data (files, trees, contract books)."""


class DimensionMismatch(InputError):
    """An adapted quantity does not line up with the tree level it claims."""


class NotSPD(ReinsqpError):
    """A matrix required to be symmetric positive definite is not."""


class SingularPivot(ReinsqpError):
    """An elimination pivot matrix is numerically singular.

    Attributes
    ----------
    level : elimination level at which the pivot failed
    cond : estimated condition number of the offending matrix
    """

    def __init__(self, level: int, cond: float):
        self.level = level
        self.cond = cond
        super().__init__(f"singular pivot at level {level} (cond ~ {cond:.3e})")


class MaxPivotsExceeded(ReinsqpError):
    """The active-set loop exceeded its pivot budget without terminating."""


class Infeasible(ReinsqpError):
    """The constraint set is empty."""


class InfeasibleDeterministic(Infeasible):
    """The deterministic (expectation-level) constraint set is empty."""


class NumericalFailure(ReinsqpError):
    """A computation finished but its certificate check failed."""
