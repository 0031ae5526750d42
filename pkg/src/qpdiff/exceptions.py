"""Exception and warning types raised across the package."""


class QpDiffError(Exception):
    """Base class for all package errors."""


class SingularMatrix(QpDiffError):
    """A factorization hit a zero (or numerically zero) pivot."""


class RefinementStalled(QpDiffError):
    """Iterative refinement stopped making progress before reaching tolerance."""


class SingularBackwardSystem(QpDiffError):
    """The backward KKT system could not be solved to tolerance."""


class LayerForwardFailed(QpDiffError):
    """The forward solve of a layer did not return a solved status."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class UnsupportedSocp(QpDiffError):
    """The closed-form SOCP forward path only covers a_i = 0, m = 1."""


class InvalidExternalSolution(QpDiffError):
    """An externally supplied primal-dual point fails the KKT check."""


class ZeroVector(QpDiffError):
    """Cosine similarity is undefined for a zero vector."""


class ActiveSetFlip(QpDiffError):
    """The active set changed under a finite-difference perturbation."""


class InsufficientHistory(QpDiffError):
    """Not enough rows of returns to estimate a risk model."""


class DegenerateSeries(QpDiffError):
    """A ratio metric has a zero denominator."""


class DegenerateActiveSetWarning(UserWarning):
    """Some inequality is weakly active (zero multiplier and zero slack)."""
