"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""

from __future__ import annotations


class BHError(Exception):
    exit_code = 1


class ParameterError(BHError, ValueError):
    """Invalid argument or configuration value."""

    exit_code = 2


class DataError(BHError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericalError(BHError, ArithmeticError):
    exit_code = 4


class CholeskyError(NumericalError):
    """Cholesky factorization failed even after the jitter ladder.

    ``pivot`` is the 1-based index of the first non-positive leading minor.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class SamplerError(NumericalError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class InfeasibleError(NumericalError):
    """Portfolio constraint set is empty; ``constraint`` names the culprit."""

    def __init__(self, message: str, constraint: str):
        super().__init__(message)
        self.constraint = constraint


class UndefinedMetricError(NumericalError):
    pass
