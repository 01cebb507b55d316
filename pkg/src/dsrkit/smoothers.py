"""Nonparametric spatial regression engines.

Three smoothers live here:

* universal Kriging with a linear mean, covariance parameters estimated by
  maximizing the (restricted) profile likelihood over
  ``(log gamma, log omega2, log sigma2)`` with the slope profiled out by GLS
  at every objective evaluation (``fit_gp_reml`` / ``krige_predict``);
* the regularized squared-exponential predictor used by the theoretical
  estimator, with hyperparameters picked on a training/validation split over
  fixed grids (``theoretical_krige`` / ``tv_grid_select``);
* a thin-plate-style penalized spline with GCV-selected smoothing
  (``spline_design`` / ``fit_spline_gcv`` / ``spline_predict``).

Fits are immutable after construction and safe to share across threads;
fitting itself is single-threaded per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist

from .errors import (
    BoundsInverted,
    DegenerateHat,
    DimensionMismatch,
    DomainError,
    DuplicateKnots,
    EmptyGrid,
    NotPositiveDefinite,
    OptimFailed,
    SingularMeanDesign,
)
from .kernels import (
    HALF_INTEGER_SMOOTHNESS,
    KernelSpec,
    correlation_from_distances,
    correlation_matrix,
)
from .numerics import SpdFactor, chol_solve, cholesky, nelder_mead

__all__ = [
    "GpFit",
    "SplineFit",
    "TvSelection",
    "fit_gp_reml",
    "fit_gp_given",
    "krige_predict",
    "tv_grid_select",
    "theoretical_krige",
    "clip_values",
    "select_knots",
    "spline_design",
    "fit_spline_gcv",
    "spline_predict",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpFit:
    """Fitted universal-Kriging model.

    ``dual_weights`` solves ``(omega2*C + sigma2*I) w = y - X @ slope``, so a
    trend prediction at new locations is
    ``omega2 * C(new, train) @ dual_weights``.
    """

    spec: KernelSpec
    slope: np.ndarray
    training_locations: np.ndarray
    training_mean_design: np.ndarray
    factor: SpdFactor
    dual_weights: np.ndarray
    reml_value: float
    used_reml: bool


@dataclass(frozen=True)
class SplineFit:
    """Penalized thin-plate fit: radial coefficients first, affine part last."""

    knots: np.ndarray
    coefficients: np.ndarray
    lambda_: float
    gcv_value: float
    edf: float


@dataclass(frozen=True)
class TvSelection:
    lambda_star: float
    gamma_star: float
    validation_mse: float


def _gls_profile(
    factor: SpdFactor, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """GLS slope given a covariance factor; returns (slope, Sigma^-1 r, XtSiX, quad)."""
    n, p = X.shape
    sol = chol_solve(factor, np.column_stack([X, y]))
    SiX, Siy = sol[:, :p], sol[:, p]
    XtSiX = X.T @ SiX
    slope = np.linalg.solve(XtSiX, X.T @ Siy)
    Sir = Siy - SiX @ slope
    quad = float((y - X @ slope) @ Sir)
    return slope, Sir, XtSiX, quad


def _criterion_value(
    factor: SpdFactor, X: np.ndarray, y: np.ndarray, reml: bool
) -> tuple[float, np.ndarray, np.ndarray]:
    slope, Sir, XtSiX, quad = _gls_profile(factor, X, y)
    n = y.size
    value = -0.5 * (n * _LOG_2PI + factor.log_det + quad)
    if reml:
        sign, logdet = np.linalg.slogdet(XtSiX)
        if sign <= 0:
            return -math.inf, slope, Sir
        value -= 0.5 * logdet
    return value, slope, Sir


def _as_design(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def fit_gp_given(
    response: np.ndarray,
    mean_design: np.ndarray,
    locations: np.ndarray,
    spec: KernelSpec,
    criterion: str = "reml",
    distances: np.ndarray | None = None,
) -> GpFit:
    """Universal-Kriging fit at fixed covariance parameters (GLS slope only)."""
    y = np.asarray(response, dtype=float).ravel()
    X = _as_design(mean_design)
    S = np.atleast_2d(np.asarray(locations, dtype=float))
    D = cdist(S, S) if distances is None else distances
    cov = spec.omega2 * correlation_from_distances(spec, D)
    cov[np.diag_indices_from(cov)] += spec.sigma2
    factor = cholesky(cov)
    value, slope, Sir = _criterion_value(factor, X, y, reml=criterion.lower() == "reml")
    return GpFit(
        spec=spec,
        slope=slope,
        training_locations=S,
        training_mean_design=X,
        factor=factor,
        dual_weights=Sir,
        reml_value=value,
        used_reml=criterion.lower() == "reml",
    )


def fit_gp_reml(
    response: np.ndarray,
    mean_design: np.ndarray,
    locations: np.ndarray,
    family: str = "matern",
    tau_mode: str | float = "profile",
    criterion: str = "reml",
    budget: int = 200,
    tol: float = 1e-3,
    distances: np.ndarray | None = None,
) -> GpFit:
    """Fit a universal-Kriging model by (restricted) maximum likelihood.

    The profile likelihood is maximized over
    ``(log gamma, log omega2, log sigma2)`` with Nelder-Mead; the slope is
    profiled out by GLS at each evaluation, and the REML criterion subtracts
    ``0.5 * log det(X' Sigma^-1 X)``.  With ``tau_mode="profile"`` the
    optimization is repeated for each half-integer Matern smoothness and the
    best criterion value wins; a float fixes the smoothness.

    Parameters
    ----------
    response : (n,) array
    mean_design : (n, p) array
        Fixed-effects design (must have full column rank).
    locations : (n, d) array
    family : {"matern", "sqexp", "gneiting"}
    tau_mode : "profile" or float
    criterion : {"reml", "ml"}
    budget, tol
        Evaluation budget and relative simplex tolerance per Nelder-Mead run.
    distances : optional precomputed ``cdist(locations, locations)``.
    """
    y = np.asarray(response, dtype=float).ravel()
    X = _as_design(mean_design)
    S = np.atleast_2d(np.asarray(locations, dtype=float))
    n, p = X.shape
    if n != y.size:
        raise DimensionMismatch("mean design rows do not match the response length")
    if n < p + 2:
        raise ValueError(f"need at least p+2 = {p + 2} observations, got {n}")
    if np.linalg.matrix_rank(X) < p:
        raise SingularMeanDesign("mean design does not have full column rank")
    reml = criterion.lower() == "reml"

    D = cdist(S, S) if distances is None else distances

    # Scale-free initialization: range at 20% of the domain diameter,
    # signal and noise variances each at half the detrended variance.
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid0 = y - X @ beta0
    v0 = max(float(np.var(resid0)), 1e-12)
    diam = max(float(D.max()), 1e-12)
    theta0 = np.log([0.2 * diam, 0.5 * v0, 0.5 * v0])

    if family == "matern":
        if tau_mode == "profile":
            taus: tuple[float, ...] = HALF_INTEGER_SMOOTHNESS
        else:
            taus = (float(tau_mode),)
    else:
        taus = (None,)  # type: ignore[assignment]

    eye_idx = np.diag_indices(n)

    def make_objective(tau):
        spec_proto = KernelSpec(family, 1.0, tau)

        def neg_criterion(theta: np.ndarray) -> float:
            if np.any(np.abs(theta) > 40.0):
                return math.inf
            gamma, omega2, sigma2 = np.exp(theta)
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                cov = omega2 * correlation_from_distances(
                    KernelSpec(family, gamma, tau, omega2, sigma2), D
                )
                cov[eye_idx] += sigma2
                if not np.isfinite(cov).all():
                    return math.inf
                try:
                    factor = cholesky(cov)
                except NotPositiveDefinite:
                    return math.inf
                try:
                    value, _, _ = _criterion_value(factor, X, y, reml)
                except np.linalg.LinAlgError:
                    return math.inf
            return -value if math.isfinite(value) else math.inf

        return neg_criterion

    best_tau, best_theta, best_value = None, None, math.inf
    for tau in taus:
        result = nelder_mead(make_objective(tau), theta0, budget=budget, tol=tol)
        if result.value < best_value:
            best_tau, best_theta, best_value = tau, result.x, result.value
    if not math.isfinite(best_value):
        raise OptimFailed("no finite criterion value found over the search")

    gamma, omega2, sigma2 = np.exp(best_theta)
    spec = KernelSpec(family, float(gamma), best_tau, float(omega2), float(sigma2))
    return fit_gp_given(y, X, S, spec, criterion=criterion, distances=D)


def krige_predict(
    fit: GpFit,
    new_locations: np.ndarray,
    new_mean_design: np.ndarray | None = None,
) -> np.ndarray:
    """Spatial-trend prediction ``omega2 * C(new, train) @ dual_weights``.

    Returns the trend only; the caller adds the fixed-effects part
    ``new_mean_design @ fit.slope`` where needed.  ``new_mean_design`` is
    accepted for dimension validation.
    """
    S_new = np.atleast_2d(np.asarray(new_locations, dtype=float))
    if S_new.shape[1] != fit.training_locations.shape[1]:
        raise DimensionMismatch("new locations have a different coordinate dimension")
    if new_mean_design is not None:
        Xn = np.atleast_2d(np.asarray(new_mean_design, dtype=float))
        if Xn.shape != (S_new.shape[0], fit.training_mean_design.shape[1]):
            raise DimensionMismatch("new mean design shape does not match the fit")
    C_cross = correlation_matrix(fit.spec, S_new, fit.training_locations)
    return fit.spec.omega2 * (C_cross @ fit.dual_weights)


def theoretical_krige(
    target_locations: np.ndarray,
    source_locations: np.ndarray,
    source_response: np.ndarray,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Squared-exponential ridge predictor with nugget multiplier n*lambda.

    Computes ``C(targets, sources) (C(sources, sources) + n*lam*I)^{-1} y``
    where ``n`` is the number of source points.
    """
    if lam < 0.0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    spec = KernelSpec("sqexp", gamma)
    S_t = np.atleast_2d(np.asarray(target_locations, dtype=float))
    S_s = np.atleast_2d(np.asarray(source_locations, dtype=float))
    y = np.asarray(source_response, dtype=float).ravel()
    n = y.size
    M = correlation_matrix(spec, S_s, S_s)
    M[np.diag_indices_from(M)] += n * lam
    factor = cholesky(M, jitter_rel=0.0 if lam == 0.0 else 1e-8)
    return correlation_matrix(spec, S_t, S_s) @ chol_solve(factor, y)


def _grid(m: int) -> np.ndarray:
    # m evenly spaced values in (0, 1], ending at 1.
    return np.arange(1, m + 1) / m


def grid_sizes(n_full: int) -> tuple[int, int]:
    """(lambda, gamma) grid sizes: ceil(n/2) and ceil(sqrt(n)/2)."""
    if n_full < 2:
        raise EmptyGrid(f"grids require a sample size of at least 2, got {n_full}")
    return math.ceil(n_full / 2), math.ceil(math.sqrt(n_full) / 2)


def tv_grid_select(
    train_locations: np.ndarray,
    train_response: np.ndarray,
    valid_locations: np.ndarray,
    valid_response: np.ndarray,
    n_full: int,
) -> TvSelection:
    """Pick (lambda, gamma) minimizing validation MSE over the fixed grids.

    The lambda grid has ``ceil(n_full/2)`` evenly spaced values in (0, 1] and
    the gamma grid ``ceil(sqrt(n_full)/2)``; the training half is used to
    predict the validation half for every pair.  Ties are broken toward the
    smaller lambda, then the smaller gamma.
    """
    n_lam, n_gam = grid_sizes(n_full)
    S_t = np.atleast_2d(np.asarray(train_locations, dtype=float))
    y_t = np.asarray(train_response, dtype=float).ravel()
    S_v = np.atleast_2d(np.asarray(valid_locations, dtype=float))
    y_v = np.asarray(valid_response, dtype=float).ravel()
    if y_t.size == 0 or y_v.size == 0:
        raise EmptyGrid("both training and validation halves must be non-empty")
    m = y_t.size

    lam_grid = _grid(n_lam)
    gam_grid = _grid(n_gam)
    best = (math.inf, math.inf, math.inf)  # (mse, lambda, gamma)
    D_tt = cdist(S_t, S_t)
    D_vt = cdist(S_v, S_t)
    for gam in gam_grid:
        spec = KernelSpec("sqexp", float(gam))
        C_tt = correlation_from_distances(spec, D_tt)
        C_vt = correlation_from_distances(spec, D_vt)
        # One symmetric eigendecomposition serves every lambda on this gamma.
        eigvals, Q = eigh(C_tt)
        eigvals = np.clip(eigvals, 0.0, None)
        z = Q.T @ y_t
        B = C_vt @ Q
        for lam in lam_grid:
            pred = B @ (z / (eigvals + m * lam))
            mse = float(np.mean((y_v - pred) ** 2))
            cand = (mse, float(lam), float(gam))
            if cand < best:
                best = cand
    return TvSelection(lambda_star=best[1], gamma_star=best[2], validation_mse=best[0])


def clip_values(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Element-wise clamp to [lo, hi]."""
    if lo > hi:
        raise BoundsInverted(f"lo={lo} exceeds hi={hi}")
    return np.clip(np.asarray(v, dtype=float), lo, hi)


def select_knots(locations: np.ndarray, count: int = 100) -> np.ndarray:
    """Space-filling knot subsample by farthest-point selection.

    Deterministic: starts at the point nearest the centroid and greedily adds
    the point farthest from the chosen set (first index wins ties).  Stops
    early if only coincident points remain.
    """
    S = np.atleast_2d(np.asarray(locations, dtype=float))
    n = S.shape[0]
    if count >= n:
        uniq = np.unique(S, axis=0)
        return uniq
    start = int(np.argmin(np.linalg.norm(S - S.mean(axis=0), axis=1)))
    chosen = [start]
    min_dist = np.linalg.norm(S - S[start], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(min_dist))
        if min_dist[nxt] <= 0.0:
            break
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(S - S[nxt], axis=1))
    return S[np.asarray(chosen)]


def _tps_basis(r: np.ndarray) -> np.ndarray:
    # r^2 log r with the limit value 0 at r = 0.
    out = np.zeros_like(r)
    nz = r > 0.0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def spline_design(locations: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Thin-plate design: radial columns ``r^2 log r`` per knot, then (1, s1, s2)."""
    S = np.atleast_2d(np.asarray(locations, dtype=float))
    K = np.atleast_2d(np.asarray(knots, dtype=float))
    if S.shape[1] != 2 or K.shape[1] != 2:
        raise DimensionMismatch("thin-plate design requires 2-dimensional locations")
    if K.shape[0] > 1:
        kd = cdist(K, K)
        kd[np.diag_indices_from(kd)] = np.inf
        if kd.min() <= 0.0:
            raise DuplicateKnots("knot set contains coincident points")
    radial = _tps_basis(cdist(S, K))
    affine = np.column_stack([np.ones(S.shape[0]), S])
    return np.column_stack([radial, affine])


def _penalized_lstsq(
    design: np.ndarray,
    response: np.ndarray,
    lam: float,
    penalty_mask: np.ndarray,
) -> tuple[np.ndarray, float, float]:
    """Ridge on the masked columns; returns (coef, trace of hat, RSS)."""
    XtX = design.T @ design
    Xty = design.T @ response
    M = XtX + lam * np.diag(penalty_mask.astype(float))
    factor = cholesky(M)
    coef = chol_solve(factor, Xty)
    trace_h = float(np.trace(chol_solve(factor, XtX)))
    resid = response - design @ coef
    return coef, trace_h, float(resid @ resid)


def default_lambda_grid(n: int) -> np.ndarray:
    """30 log-spaced smoothing values spanning [1e-8, 1e2] scaled by n."""
    return n * np.logspace(-8.0, 2.0, 30)


def _gcv_grid_scan(D, y, grid, penalty_mask):
    """(lambda, trace, RSS, coefficient thunk) per grid value, scanning cheaply.

    The unpenalized columns are absorbed by orthogonal projection and the
    penalized block reduced to ordinary ridge through one SVD, so every grid
    value costs O(k); the closed forms stay exact in the lambda -> infinity
    limit.  SVD convergence failures fall back to a factorization per value.
    """
    n = y.size
    Dp = D[:, penalty_mask]
    Du = D[:, ~penalty_mask]
    try:
        if Du.shape[1]:
            Uu, su, _ = np.linalg.svd(Du, full_matrices=False)
            rank_u = int(np.sum(su > su[0] * 1e-12)) if su.size else 0
            Q = Uu[:, :rank_u]
            y_t = y - Q @ (Q.T @ y)
            Dp_t = Dp - Q @ (Q.T @ Dp)
        else:
            rank_u = 0
            y_t, Dp_t = y, Dp
        if Dp_t.shape[1]:
            U, s, Wt = np.linalg.svd(Dp_t, full_matrices=False)
        else:
            U = np.zeros((n, 0))
            s = np.zeros(0)
            Wt = np.zeros((0, 0))
        uy = U.T @ y_t
        resid_floor = float(y_t @ y_t) - float(uy @ uy)  # energy outside span(U)

        def coefficients(lam: float) -> np.ndarray:
            cp = Wt.T @ (s / (s**2 + lam) * uy) if s.size else np.zeros(Dp.shape[1])
            coef = np.zeros(D.shape[1])
            coef[penalty_mask] = cp
            if Du.shape[1]:
                cu, *_ = np.linalg.lstsq(Du, y - Dp @ cp, rcond=None)
                coef[~penalty_mask] = cu
            return coef

        for lam in grid:
            lam = float(lam)
            ridge = s**2 / (s**2 + lam) if s.size else s
            trace_h = rank_u + float(np.sum(ridge))
            rss = max(resid_floor, 0.0) + float(((1.0 - ridge) * uy) @ ((1.0 - ridge) * uy))
            yield lam, trace_h, rss, lambda lam=lam: coefficients(lam)
    except np.linalg.LinAlgError:
        for lam in grid:
            coef, trace_h, rss = _penalized_lstsq(D, y, float(lam), penalty_mask)
            yield float(lam), trace_h, rss, lambda c=coef: c


def fit_spline_gcv(
    response: np.ndarray,
    design: np.ndarray,
    lambda_grid: np.ndarray | None = None,
    penalty_mask: np.ndarray | None = None,
    knots: np.ndarray | None = None,
) -> SplineFit:
    """Penalized least squares with the smoothing value chosen by GCV.

    Only the radial coefficients are penalized (by default all columns except
    the trailing three affine ones); ``GCV = n * RSS / (n - tr H)^2``.
    """
    y = np.asarray(response, dtype=float).ravel()
    D = np.atleast_2d(np.asarray(design, dtype=float))
    n, k = D.shape
    if penalty_mask is None:
        penalty_mask = np.ones(k, dtype=bool)
        penalty_mask[-3:] = False
    grid = default_lambda_grid(n) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)

    best = None
    for lam, trace_h, rss, coef_fn in _gcv_grid_scan(D, y, grid, penalty_mask):
        denom = n - trace_h
        if denom <= 1e-8 * n:
            continue  # hat trace is (numerically) n: GCV undefined at this lambda
        gcv = n * rss / denom**2
        if best is None or gcv < best[0]:
            best = (gcv, lam, coef_fn, trace_h)
    if best is None:
        raise DegenerateHat("hat-matrix trace equals n for every candidate lambda")
    gcv, lam, coef_fn, trace_h = best
    coef = coef_fn()
    return SplineFit(
        knots=np.empty((0, 2)) if knots is None else np.asarray(knots, dtype=float),
        coefficients=coef,
        lambda_=lam,
        gcv_value=gcv,
        edf=trace_h,
    )


def spline_predict(fit: SplineFit, new_locations: np.ndarray) -> np.ndarray:
    """Evaluate the thin-plate basis at new locations and apply coefficients."""
    D = spline_design(new_locations, fit.knots)
    if D.shape[1] != fit.coefficients.size:
        raise DimensionMismatch(
            f"design has {D.shape[1]} columns but the fit has {fit.coefficients.size} coefficients"
        )
    return D @ fit.coefficients
