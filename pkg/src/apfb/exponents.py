"""Exponent algebra tying gamma, beta and alpha together."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import DomainError

__all__ = ["Exponents", "derive_exponents", "exponents_from_alpha"]


@dataclass(frozen=True)
class Exponents:
    """The triple ``(gamma, beta, alpha)`` together with the ambient dimension.

    ``beta = 2 / (2 - gamma)`` is the growth exponent of ``u`` away from the
    free boundary and ``alpha = gamma * beta`` is the weight exponent of the
    modified functional.
    """

    gamma: float
    beta: float
    alpha: float
    n: int

    def to_dict(self):
        return {"gamma": self.gamma, "beta": self.beta, "alpha": self.alpha, "n": self.n}


def _check_n(n):
    if int(n) != n or n < 1:
        raise DomainError(f"dimension must be a positive integer, got {n!r}")
    return int(n)


def _exact(x, max_denominator=1000):
    """Exact rational for ``x``, snapped to a simple fraction that rounds to ``x``."""
    q = Fraction(x)
    simple = q.limit_denominator(max_denominator)
    return simple if float(simple) == x else q


def derive_exponents(gamma: float, n: int = 2) -> Exponents:
    """Build :class:`Exponents` from ``gamma`` in ``[0, 2)``.

    The exponents are evaluated in exact rational arithmetic and rounded
    once, so they are correctly rounded. A ``gamma`` that is the nearest
    float to a fraction with small denominator is read as that fraction.

    >>> derive_exponents(1.0, 3).alpha
    2.0
    >>> derive_exponents(2 / 3).alpha
    1.0
    """
    gamma = float(gamma)
    if not (0.0 <= gamma < 2.0):
        raise DomainError(f"gamma must lie in [0, 2), got {gamma!r}")
    n = _check_n(n)
    g = _exact(gamma)
    beta = float(2 / (2 - g))
    alpha = float(2 * g / (2 - g))
    return Exponents(gamma=gamma, beta=beta, alpha=alpha, n=n)


def exponents_from_alpha(alpha: float, n: int = 2) -> Exponents:
    """Inverse map: recover ``gamma = 2 alpha / (2 + alpha)`` from ``alpha >= 0``.

    ``alpha`` is stored exactly as given so that thresholds expressed in
    ``alpha`` survive the round trip untouched.
    """
    alpha = float(alpha)
    if not alpha >= 0.0:
        raise DomainError(f"alpha must be nonnegative, got {alpha!r}")
    n = _check_n(n)
    gamma = 2.0 * alpha / (2.0 + alpha)
    beta = (2.0 + alpha) / 2.0
    return Exponents(gamma=gamma, beta=beta, alpha=alpha, n=n)
