"""Exception hierarchy shared across the toolkit.

Every library-raised error derives from :class:`DsrError` so callers (the
Monte Carlo harness, the CLI) can distinguish estimation failures from
programming errors.
"""


class DsrError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(DsrError):
    """Array shapes are inconsistent with the operation's contract."""


class DomainError(DsrError):
    """A scalar argument lies outside its valid domain."""


class NotPositiveDefinite(DsrError):
    """Matrix could not be factored even after the jitter retries."""


class NuggetOnCrossMatrix(DsrError):
    """Nugget requested on a cross-correlation matrix (only valid for self-matrices)."""


class SingularMeanDesign(DsrError):
    """The fixed-effects design matrix is rank deficient."""


class OptimFailed(DsrError):
    """Every evaluated parameter point produced a non-finite objective."""


class EmptyGrid(DsrError):
    """Hyperparameter grid would be empty for the given sample size."""


class BoundsInverted(DsrError):
    """Clipping bounds given with lo > hi."""


class DuplicateKnots(DsrError):
    """Spline knot set contains coincident locations."""


class DegenerateHat(DsrError):
    """Smoother hat matrix has trace n for every candidate smoothing value."""


class BadFoldCount(DsrError):
    """Fold count outside 2..n."""


class RankDeficient(DsrError):
    """A second-stage regression system is (numerically) singular."""


class EmptyInput(DsrError):
    """An aggregation was called with no inputs."""


class NotPerfectSquare(DsrError):
    """Grid location sampling requires a perfect-square sample size."""


class AllFailed(DsrError):
    """Every Monte Carlo replication failed for a method."""


class BootstrapFailed(DsrError):
    """More than 20% of bootstrap replicates raised estimation errors."""


class SmallFoldWarning(UserWarning):
    """Folds smaller than the recommended minimum size (20)."""
