"""Dense linear algebra, Gaussian likelihood, derivative-free optimization,
reproducible random streams, and scalar probability transforms.

All routines are pure and reentrant.  Random streams are counter-based
(Philox keyed through :class:`numpy.random.SeedSequence`), so a stream is a
value: two streams built from the same ``(base_seed, stream_id)`` replay the
same sequence, and distinct ids give statistically independent sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import LinAlgError
from scipy.linalg import cholesky as _lapack_cholesky
from scipy.linalg import cho_solve as _lapack_cho_solve
from scipy.special import erfc as _erfc

from .errors import DimensionMismatch, DomainError, NotPositiveDefinite

__all__ = [
    "SpdFactor",
    "cholesky",
    "chol_solve",
    "gaussian_loglik",
    "loglik_from_factor",
    "NelderMeadResult",
    "nelder_mead",
    "normal_cdf",
    "normal_quantile",
    "gamma_shape1_quantile",
    "RngStream",
    "rng_stream",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    ``lower @ lower.T`` reconstructs the (possibly jittered) input;
    ``log_det`` is the log-determinant of the factored matrix and
    ``jitter_applied`` the total diagonal shift that was needed.
    """

    lower: np.ndarray
    log_det: float
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def cholesky(
    matrix: np.ndarray,
    *,
    jitter_rel: float = 1e-8,
    max_retries: int = 3,
    escalation: float = 10.0,
) -> SpdFactor:
    """Factor a symmetric positive-definite matrix, retrying with jitter.

    On a failed pivot, ``jitter_rel * mean(diag)`` is added to the diagonal
    and the factorization retried, escalating the jitter by ``escalation``
    on each of up to ``max_retries`` retries.

    Raises
    ------
    DimensionMismatch
        If the input is not square.
    NotPositiveDefinite
        If the matrix is asymmetric beyond 1e-10 relative tolerance, contains
        non-finite entries, or cannot be repaired by the jitter schedule.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NotPositiveDefinite("matrix contains non-finite entries")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-10 * scale:
        raise NotPositiveDefinite("matrix is not symmetric within 1e-10 relative tolerance")

    diag_mean = float(np.mean(np.diagonal(a)))
    base_jitter = jitter_rel * max(diag_mean, np.finfo(float).tiny)
    jitter = 0.0
    for attempt in range(max_retries + 1):
        try:
            work = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
            lower = _lapack_cholesky(work, lower=True, check_finite=False)
        except LinAlgError:
            jitter = base_jitter * escalation**attempt if attempt < max_retries else jitter
            if attempt == max_retries:
                break
            continue
        log_det = 2.0 * float(np.sum(np.log(np.diagonal(lower))))
        return SpdFactor(lower=lower, log_det=log_det, jitter_applied=jitter)
    raise NotPositiveDefinite(
        f"matrix not positive definite after {max_retries} jitter retries "
        f"(last jitter {jitter:.3e})"
    )


def chol_solve(factor: SpdFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = rhs`` by forward/back substitution."""
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != factor.n:
        raise DimensionMismatch(
            f"rhs has {b.shape[0]} rows, factor dimension is {factor.n}"
        )
    return _lapack_cho_solve((factor.lower, True), b, check_finite=False)


def loglik_from_factor(factor: SpdFactor, residual: np.ndarray) -> float:
    """Gaussian log-density of ``residual`` under N(0, factored covariance)."""
    r = np.asarray(residual, dtype=float).ravel()
    if r.size != factor.n:
        raise DimensionMismatch("residual length does not match the factor")
    alpha = chol_solve(factor, r)
    return -0.5 * (factor.n * _LOG_2PI + factor.log_det + float(r @ alpha))


def gaussian_loglik(cov: np.ndarray, residual: np.ndarray) -> float:
    """Evaluate -0.5 [n log(2*pi) + log|cov| + r' cov^{-1} r]."""
    return loglik_from_factor(cholesky(cov), residual)


class NelderMeadResult(NamedTuple):
    x: np.ndarray
    value: float
    converged: bool


def _as_finite(value: float) -> float:
    # Non-finite objective values are treated as +inf so the simplex retreats
    # from invalid parameter regions.
    v = float(value)
    return v if math.isfinite(v) else math.inf


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    init: Sequence[float],
    budget: int = 500,
    tol: float = 1e-6,
) -> NelderMeadResult:
    """Minimize ``objective`` with the Nelder-Mead simplex.

    Coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
    Terminates when the relative simplex diameter drops below ``tol`` or the
    evaluation ``budget`` is exhausted; the best point seen so far is always
    returned, so the result is never worse than the initial objective value.
    """
    x0 = np.asarray(init, dtype=float).ravel()
    k = x0.size
    if budget < k + 2:
        raise ValueError(f"budget must be at least k+2 = {k + 2}, got {budget}")

    evals = 0
    best_x = x0.copy()
    best_f = math.inf

    def f(x: np.ndarray) -> float:
        nonlocal evals, best_x, best_f
        evals += 1
        v = _as_finite(objective(x))
        if v < best_f:
            best_f = v
            best_x = x.copy()
        return v

    # Initial simplex: x0 plus one vertex per coordinate.
    sim = [x0.copy()]
    for i in range(k):
        v = x0.copy()
        v[i] = v[i] + (0.05 * abs(v[i]) if v[i] != 0.0 else 0.00025)
        sim.append(v)
    sim = np.asarray(sim)

    fsim = np.empty(k + 1)
    fsim[0] = f(sim[0])
    for i in range(1, k + 1):
        if evals >= budget:
            return NelderMeadResult(best_x, best_f, False)
        fsim[i] = f(sim[i])

    rho, chi, psi, sigma = 1.0, 2.0, 0.5, 0.5
    while True:
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]

        diam = float(np.max(np.abs(sim[1:] - sim[0])))
        if diam <= tol * max(1.0, float(np.max(np.abs(sim[0])))):
            return NelderMeadResult(best_x, best_f, True)
        if evals >= budget:
            return NelderMeadResult(best_x, best_f, False)

        centroid = sim[:-1].mean(axis=0)
        xr = centroid + rho * (centroid - sim[-1])
        fr = f(xr)
        if fr < fsim[0]:
            xe = centroid + chi * (xr - centroid)
            fe = f(xe) if evals < budget else math.inf
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
        else:
            if fr < fsim[-1]:
                xc = centroid + psi * (xr - centroid)  # outside contraction
            else:
                xc = centroid - psi * (centroid - sim[-1])  # inside contraction
            fc = f(xc) if evals < budget else math.inf
            if fc < min(fr, fsim[-1]):
                sim[-1], fsim[-1] = xc, fc
            else:
                for i in range(1, k + 1):  # shrink toward the best vertex
                    if evals >= budget:
                        return NelderMeadResult(best_x, best_f, False)
                    sim[i] = sim[0] + sigma * (sim[i] - sim[0])
                    fsim[i] = f(sim[i])


def normal_cdf(x):
    """Standard normal CDF, Phi(x) = erfc(-x / sqrt(2)) / 2.

    Accepts scalars or arrays; absolute error below 1e-10.
    """
    result = 0.5 * _erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(result) if np.isscalar(x) or np.ndim(x) == 0 else result


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF (used for CI half-widths)."""
    from scipy.special import ndtri

    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    return float(ndtri(p))


def gamma_shape1_quantile(p, scale: float):
    """Quantile of the shape-1 gamma (exponential) distribution: -scale*log(1-p)."""
    if scale <= 0.0 or not math.isfinite(scale):
        raise DomainError(f"scale must be positive and finite, got {scale}")
    parr = np.asarray(p, dtype=float)
    if np.any(parr < 0.0) or np.any(parr >= 1.0):
        raise DomainError("probability must satisfy 0 <= p < 1")
    result = -scale * np.log1p(-parr)
    return float(result) if np.ndim(p) == 0 else result


@dataclass
class RngStream:
    """Reproducible random stream keyed by ``(base_seed, stream_id)``.

    Streams derive from a Philox counter-based bit generator; ``substream``
    extends the spawn key, giving independent child streams (one per
    replication, per method, per bootstrap) that do not depend on evaluation
    order.  Instances are stateful and must not be shared across threads.
    """

    base_seed: int
    stream_id: int
    _path: tuple[int, ...] = ()
    _gen: Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        seq = SeedSequence(self.base_seed, spawn_key=(self.stream_id, *self._path))
        self._gen = Generator(Philox(seq))

    @property
    def generator(self) -> Generator:
        return self._gen

    def substream(self, *key: int) -> "RngStream":
        return RngStream(self.base_seed, self.stream_id, self._path + tuple(key))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_stream(base_seed: int, stream_id: int) -> RngStream:
    """Construct the stream for ``(base_seed, stream_id)``."""
    return RngStream(base_seed, stream_id)
