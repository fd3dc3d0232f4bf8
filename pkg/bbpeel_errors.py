"""Exception hierarchy shared by every bbpeel module.

All errors derive from BBPeelError so callers (and the CLI exit-code mapping in
bbpeel_core) can catch the family in one place.
"""
from __future__ import annotations

from typing import Optional


class BBPeelError(Exception):
    """Base class for toolkit errors."""


class ConfigError(BBPeelError):
    pass


# ---------------- code construction ----------------
class CommutationFailure(BBPeelError):
    pass


class DegenerateCode(BBPeelError):
    pass


class RankDeficiency(BBPeelError):
    pass


class BudgetExhausted(BBPeelError):
    """Search budget ran out; `best` is the smallest weight seen (upper bound) or None."""
    def __init__(self, best: Optional[int], message: str = ''):
        self.best = best
        super().__init__(message or f'search budget exhausted (best upper bound: {best})')


# ---------------- circuit / dem ----------------
class UnsupportedBasis(BBPeelError):
    pass


class NonIntegral(BBPeelError):
    pass


class CountMismatch(BBPeelError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f'fault count mismatch: expected {expected}, built {actual}')


class ParseError(BBPeelError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f'line {line_no}: {message}')


# ---------------- decoding / theory / streaming ----------------
class SolverFailure(BBPeelError):
    pass


class OutOfValidity(BBPeelError):
    """Peel prediction evaluated with lambda < 2. The value is still carried."""
    def __init__(self, value: float, lam: float):
        self.value = value
        self.lam = lam
        super().__init__(f'peel prediction outside validity (lambda={lam:.3f} < 2); value={value:.4f}')


class RewireFailure(BBPeelError):
    def __init__(self, attempts: int):
        self.attempts = attempts
        super().__init__(f'configuration-model rewiring failed after {attempts} attempts')


class WindowDemMismatch(BBPeelError):
    pass


class Canceled(BBPeelError):
    """Raised when a run's callbacks report cancellation."""


__all__ = [
    'BBPeelError', 'ConfigError', 'CommutationFailure', 'DegenerateCode', 'RankDeficiency',
    'BudgetExhausted', 'UnsupportedBasis', 'NonIntegral', 'CountMismatch', 'ParseError',
    'SolverFailure', 'OutOfValidity', 'RewireFailure', 'WindowDemMismatch', 'Canceled',
]
