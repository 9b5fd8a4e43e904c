"""Exception hierarchy shared by every module."""


class APFBError(Exception):
    """Base class for all errors raised by :mod:`apfb`."""


class DomainError(APFBError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SupportError(DomainError):
    """A compactly supported object touches the boundary of its grid."""


class SolverError(APFBError, RuntimeError):
    """An iterative or adaptive solver failed to meet its tolerance.

    The partially converged state, when meaningful, is attached as
    ``residual`` so that callers can report how far off the solve was.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ProfileDegenerateError(SolverError):
    """A shot profile lost monotonicity before reaching its target radius."""


class BracketError(DomainError):
    """A root-finding bracket does not contain a sign change."""


class ValidationError(APFBError, ValueError):
    """A configuration file failed schema validation."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class EvaluationError(APFBError, ValueError):
    """A user-supplied function handle returned non-finite values."""


class FitError(SolverError):
    """A least-squares design matrix is rank deficient."""


class InvertibilityError(DomainError):
    """``id + eps Phi`` is not safely invertible for the requested ``eps``."""
