"""Exception hierarchy.

``GmedDataError`` covers ingestion and validation problems (CLI exit code 2);
``GmedNumericalError`` covers optimization and linear-algebra failures
(CLI exit code 3).
"""

from __future__ import annotations


class GmedError(Exception):
    """Base class for all package errors."""


class GmedDataError(GmedError):
    """Invalid or inconsistent input data."""


class MissingMediator(GmedDataError):
    def __init__(self, unit_id: str):
        super().__init__(f"no mediator observations found for unit {unit_id!r}")
        self.unit_id = unit_id


class DimensionMismatch(GmedDataError):
    def __init__(self, expected: int, found: int, location: str):
        super().__init__(
            f"expected {expected} mediator columns, found {found} at {location}"
        )
        self.expected = expected
        self.found = found
        self.location = location


class NonFiniteValue(GmedDataError):
    def __init__(self, location: str):
        super().__init__(f"non-finite value at {location}")
        self.location = location


class SingularPooledCovariance(GmedDataError):
    """Pooled covariance is not positive definite (p too large or degenerate data)."""


class GmedNumericalError(GmedError):
    """Numerical failure during optimization or inference."""


class InfeasibleStart(GmedNumericalError):
    """A starting projection gives a non-positive variance for some unit."""


class InfeasibleState(GmedNumericalError):
    """Parameter state gives a non-positive projected variance for some unit."""


class InfeasibleLogTerm(GmedNumericalError):
    """A fitted projection gives a non-positive variance in a deflation log term."""


class RankDeficientDesign(GmedNumericalError):
    """Outcome-regression design is collinear (e.g. constant exposure)."""


class NoFeasibleCandidate(GmedNumericalError):
    """Every eigenvector candidate is infeasible for some unit."""


class AllStartsInfeasible(GmedNumericalError):
    """No feasible initialization was found among all starts."""


class SingularProjectedCovariance(GmedNumericalError):
    """A projected covariance block is singular in the diagonality criterion."""


class DegenerateResample(GmedNumericalError):
    """A bootstrap resample cannot be fit (counted as a failed replicate)."""


class TooFewDraws(GmedNumericalError):
    """Fewer than two draws supplied to an interval or p-value computation."""
