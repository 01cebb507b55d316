"""Regression-coefficient estimators for spatially confounded data.

The two-stage estimators all share one shape: estimate the latent spatial
trends of the response and each treatment, subtract them, and regress
residuals on residuals.  The double spatial regression (DSR) variants do the
first stage with universal Kriging and cross-fitting; the geoadditive
structural equation model (gSEM) and the spatial-plus comparator use
penalized splines without sample splitting; the spatial linear mixed model
and ordinary least squares serve as the naive baselines.

Variance estimation is the heteroskedasticity-robust sandwich
``(V'M)^{-1} (sum_i U_i^2 V_i V_i') (V'M)^{-T}`` for the DSR family and a
nonparametric bootstrap for gSEM / spatial-plus.

All fit functions are pure given ``(dataset, rng)`` and return an immutable
:class:`EstimateResult`; bootstrap replicates and fold splits draw only from
the stream they are handed, so results are reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    BadFoldCount,
    BootstrapFailed,
    DomainError,
    DsrError,
    EmptyInput,
    RankDeficient,
    SmallFoldWarning,
)
from .kernels import KernelSpec
from .numerics import RngStream, chol_solve, cholesky, normal_quantile, rng_stream
from .smoothers import (
    GpFit,
    clip_values,
    fit_gp_given,
    fit_gp_reml,
    fit_spline_gcv,
    krige_predict,
    select_knots,
    spline_design,
    theoretical_krige,
    tv_grid_select,
)

__all__ = [
    "Dataset",
    "FoldAssignment",
    "EstimateResult",
    "RemlWorkingModel",
    "FixedSpecWorkingModel",
    "ZeroWorkingModel",
    "partition_folds",
    "fit_ols",
    "fit_lmm",
    "fit_gsem",
    "fit_spatialplus",
    "dsr_crossfit",
    "dsr_nocrossfit",
    "dsr_theoretical",
    "sandwich_variance",
    "median_aggregate",
    "bootstrap_ci",
]


@dataclass(frozen=True)
class Dataset:
    """Point-referenced regression data: response, treatments, covariates, locations.

    ``Z`` may have zero columns (no observed covariates).  All arrays must
    have the same number of rows and contain only finite values.
    """

    y: np.ndarray
    A: np.ndarray
    Z: np.ndarray
    S: np.ndarray

    def __init__(self, y, A, Z=None, S=None):
        y = np.asarray(y, dtype=float).ravel()
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if S is None:
            raise DomainError("a location matrix S is required")
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if Z is None:
            Z = np.empty((y.size, 0))
        else:
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
        n = y.size
        for name, arr in (("A", A), ("Z", Z), ("S", S)):
            if arr.shape[0] != n:
                raise DomainError(f"{name} has {arr.shape[0]} rows but y has {n}")
        for name, arr in (("y", y), ("A", A), ("Z", Z), ("S", S)):
            if arr.size and not np.isfinite(arr).all():
                raise DomainError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_treatments(self) -> int:
        return self.A.shape[1]

    def rows(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.y[idx], self.A[idx], self.Z[idx], self.S[idx])


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray  # fold ids in 1..K
    K: int

    def indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


@dataclass(frozen=True)
class EstimateResult:
    """Point estimates, variance, and per-component confidence intervals."""

    beta_hat: np.ndarray
    var_hat: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    method: str
    residuals_u: np.ndarray | None = None
    residuals_v: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.var_hat))


def partition_folds(n: int, K: int, rng: RngStream) -> FoldAssignment:
    """Split ``n`` indices into ``K`` random folds of near-equal size.

    When ``K`` does not divide ``n``, the first ``n mod K`` folds receive one
    extra index.
    """
    if not 2 <= K <= n:
        raise BadFoldCount(f"fold count must satisfy 2 <= K <= n, got K={K}, n={n}")
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    base, extra = divmod(n, K)
    start = 0
    for k in range(1, K + 1):
        size = base + (1 if k <= extra else 0)
        fold_of[perm[start : start + size]] = k
        start += size
    return FoldAssignment(fold_of=fold_of, K=K)


def _check_second_stage(VtM: np.ndarray) -> None:
    # Degenerate residualized treatments make the second stage meaningless.
    s = np.linalg.svd(VtM, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0]:
        raise RankDeficient("second-stage system V'M is numerically singular")


def sandwich_variance(V_hat: np.ndarray, bread_pair: np.ndarray, U_hat: np.ndarray) -> np.ndarray:
    """Heteroskedasticity-robust sandwich with bread ``(V' M)^{-1}``.

    ``bread_pair`` is the matrix paired with the residualized treatments in
    the bread (the raw treatments for the practical estimator, the
    residualized treatments themselves for the theoretical one); the meat is
    ``sum_i U_i^2 V_i V_i'``.  The result is symmetrized by averaging with
    its transpose.
    """
    V = np.asarray(V_hat, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    M = np.asarray(bread_pair, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    U = np.asarray(U_hat, dtype=float).ravel()
    VtM = V.T @ M
    _check_second_stage(VtM)
    meat = (V * U[:, None] ** 2).T @ V
    bread = np.linalg.inv(VtM)
    out = bread @ meat @ bread.T
    return 0.5 * (out + out.T)


def _intervals(beta: np.ndarray, var: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    z = normal_quantile(0.5 + level / 2.0)
    half = z * np.sqrt(np.clip(np.diag(var), 0.0, None))
    return beta - half, beta + half


def _with_intercept(Z: np.ndarray) -> np.ndarray:
    return np.column_stack([Z, np.ones(Z.shape[0])])


# ---------------------------------------------------------------------------
# Baselines: OLS and the spatial linear mixed model
# ---------------------------------------------------------------------------


def fit_ols(
    dataset: Dataset,
    robust: bool = False,
    ci_level: float = 0.95,
    intercept: bool = True,
) -> EstimateResult:
    """Least squares of the response on [treatments, covariates, intercept].

    The classical variance is ``sigma2_hat (X'X)^{-1}``; with ``robust`` the
    heteroskedasticity-robust sandwich is used instead.  Only the treatment
    block of the coefficient vector and variance matrix is reported.
    """
    y, A, Z = dataset.y, dataset.A, dataset.Z
    n, l = A.shape
    X = np.column_stack([A, Z, np.ones(n)]) if intercept else np.column_stack([A, Z])
    k = X.shape[1]
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficient("OLS design is rank deficient")
    XtX = X.T @ X
    factor = cholesky(XtX)
    coef = chol_solve(factor, X.T @ y)
    resid = y - X @ coef
    if robust:
        var_full = sandwich_variance(X, X, resid)
    else:
        dof = max(n - k, 1)
        sigma2 = float(resid @ resid) / dof
        var_full = sigma2 * chol_solve(factor, np.eye(k))
    beta = coef[:l]
    var = var_full[:l, :l]
    lo, hi = _intervals(beta, var, ci_level)
    # Frisch-Waugh residualization of the treatments on the rest of the design.
    rest = X[:, l:]
    if rest.shape[1]:
        gamma, *_ = np.linalg.lstsq(rest, A, rcond=None)
        V = A - rest @ gamma
    else:
        V = A.copy()
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method="ols" + ("-robust" if robust else ""),
        residuals_u=resid,
        residuals_v=V,
        diagnostics={"coef_full": coef},
    )


def fit_lmm(
    dataset: Dataset,
    family: str = "matern",
    tau_mode: str | float = "profile",
    ci_level: float = 0.95,
    criterion: str = "reml",
    budget: int = 200,
) -> EstimateResult:
    """Spatial linear mixed model: GLS at REML-fitted kernel parameters.

    The mean design is [treatments, covariates, intercept]; the variance of
    the treatment coefficients is the corresponding block of
    ``(X' Sigma^{-1} X)^{-1}``.  No confounding adjustment is made.
    """
    y, A, Z, S = dataset.y, dataset.A, dataset.Z, dataset.S
    n, l = A.shape
    X = np.column_stack([A, _with_intercept(Z)])
    fit = fit_gp_reml(y, X, S, family=family, tau_mode=tau_mode, criterion=criterion, budget=budget)
    SiX = chol_solve(fit.factor, X)
    var_full = np.linalg.inv(X.T @ SiX)
    beta = fit.slope[:l]
    var = 0.5 * (var_full[:l, :l] + var_full[:l, :l].T)
    lo, hi = _intervals(beta, var, ci_level)
    rest = X[:, l:]
    gamma, *_ = np.linalg.lstsq(rest, A, rcond=None)
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method="lmm",
        residuals_u=y - X @ fit.slope,
        residuals_v=A - rest @ gamma,
        diagnostics={"gp_fit": fit, "g_hat": krige_predict(fit, S)},
    )


# ---------------------------------------------------------------------------
# First-stage smoothers shared by gSEM / spatial-plus
# ---------------------------------------------------------------------------


def _spline_smoother(knot_count: int) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def fitted_values(y: np.ndarray, S: np.ndarray) -> np.ndarray:
        knots = select_knots(S, knot_count)
        design = spline_design(S, knots)
        fit = fit_spline_gcv(y, design, knots=knots)
        return design @ fit.coefficients

    return fitted_values


def _gp_smoother(
    family: str, tau_mode: str | float, budget: int
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def fitted_values(y: np.ndarray, S: np.ndarray) -> np.ndarray:
        ones = np.ones((y.size, 1))
        fit = fit_gp_reml(y, ones, S, family=family, tau_mode=tau_mode, budget=budget)
        return float(fit.slope[0]) + krige_predict(fit, S)

    return fitted_values


def _resolve_smoother(smoother, knot_count: int, family: str, tau_mode, budget: int):
    if callable(smoother):
        return smoother
    if smoother == "spline":
        return _spline_smoother(knot_count)
    if smoother == "gp":
        return _gp_smoother(family, tau_mode, budget)
    raise DomainError(f"unknown smoother {smoother!r}; expected 'spline', 'gp', or a callable")


# ---------------------------------------------------------------------------
# gSEM and spatial-plus
# ---------------------------------------------------------------------------


def fit_gsem(
    dataset: Dataset,
    smoother="spline",
    bootstrap_B: int = 100,
    ci_level: float = 0.95,
    rng: RngStream | None = None,
    knot_count: int = 100,
    family: str = "matern",
    tau_mode: str | float = "profile",
    budget: int = 200,
) -> EstimateResult:
    """Geoadditive structural equation model.

    Stage 1 regresses the response and each treatment (and covariate) on the
    locations alone; stage 2 regresses the response residuals on the
    treatment (and covariate) residuals without an intercept.  Confidence
    intervals come from an i.i.d. row bootstrap of the whole two-stage
    procedure.
    """
    rng = rng if rng is not None else rng_stream(0, 0)
    smooth = _resolve_smoother(smoother, knot_count, family, tau_mode, budget)
    l = dataset.n_treatments

    def residualize(ds: Dataset):
        h_hat = smooth(ds.y, ds.S)
        m_hat = np.column_stack([smooth(ds.A[:, j], ds.S) for j in range(ds.A.shape[1])])
        RZ = (
            np.column_stack([smooth(ds.Z[:, j], ds.S) for j in range(ds.Z.shape[1])])
            if ds.Z.shape[1]
            else np.empty((ds.n, 0))
        )
        return ds.y - h_hat, ds.A - m_hat, ds.Z - RZ, h_hat, m_hat

    def point_estimate(ds: Dataset) -> np.ndarray:
        RY, RA, RZ, _, _ = residualize(ds)
        D = np.column_stack([RA, RZ])
        DtD = D.T @ D
        _check_second_stage(DtD)
        return np.linalg.solve(DtD, D.T @ RY)[: ds.A.shape[1]]

    RY, RA, RZ, h_hat, m_hat = residualize(dataset)
    D = np.column_stack([RA, RZ])
    DtD = D.T @ D
    _check_second_stage(DtD)
    coef = np.linalg.solve(DtD, D.T @ RY)
    beta = coef[:l]
    lo, hi, draws, n_failed = bootstrap_ci(point_estimate, dataset, bootstrap_B, ci_level, rng)
    var = np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method="gsem",
        residuals_u=RY - D @ coef,
        residuals_v=RA,
        diagnostics={"h_hat": h_hat, "m_hat": m_hat, "bootstrap_failures": n_failed},
    )


def fit_spatialplus(
    dataset: Dataset,
    smoother="spline",
    bootstrap_B: int = 100,
    ci_level: float = 0.95,
    rng: RngStream | None = None,
    knot_count: int = 100,
    family: str = "matern",
    tau_mode: str | float = "profile",
    budget: int = 200,
) -> EstimateResult:
    """Spatial-plus comparator.

    Each treatment is residualized on space; the response is then regressed
    on those residuals (plus covariates) jointly with a penalized thin-plate
    spatial term whose smoothing value is chosen by GCV.  Bootstrap
    confidence intervals as for gSEM.  ``knot_count=0`` drops the spatial
    term entirely, reducing stage 2 to least squares on the residuals.
    """
    rng = rng if rng is not None else rng_stream(0, 0)
    smooth = _resolve_smoother(smoother, knot_count, family, tau_mode, budget)
    l = dataset.n_treatments

    def point_estimate(ds: Dataset):
        m_hat = np.column_stack([smooth(ds.A[:, j], ds.S) for j in range(ds.A.shape[1])])
        RA = ds.A - m_hat
        unpenalized = np.column_stack([RA, ds.Z])
        if knot_count > 0:
            knots = select_knots(ds.S, knot_count)
            spatial = spline_design(ds.S, knots)
            design = np.column_stack([unpenalized, spatial])
            mask = np.zeros(design.shape[1], dtype=bool)
            mask[unpenalized.shape[1] : unpenalized.shape[1] + knots.shape[0]] = True
        else:
            design = unpenalized
            mask = np.zeros(design.shape[1], dtype=bool)
        _check_second_stage(unpenalized.T @ unpenalized)
        fit = fit_spline_gcv(ds.y, design, penalty_mask=mask)
        return fit.coefficients[: ds.A.shape[1]], RA, design @ fit.coefficients

    beta, RA, fitted = point_estimate(dataset)
    lo, hi, draws, n_failed = bootstrap_ci(
        lambda ds: np.asarray(point_estimate(ds)[0]), dataset, bootstrap_B, ci_level, rng
    )
    var = np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method="spatialplus",
        residuals_u=dataset.y - fitted,
        residuals_v=RA,
        diagnostics={"bootstrap_failures": n_failed},
    )


# ---------------------------------------------------------------------------
# Working models for the DSR first stage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkingFit:
    """Slope of the linear mean plus a spatial-trend predictor."""

    slope: np.ndarray
    trend: Callable[[np.ndarray], np.ndarray]
    gp_fit: GpFit | None = None


class RemlWorkingModel:
    """Default first stage: universal Kriging fitted by (restricted) ML."""

    def __init__(
        self,
        family: str = "matern",
        tau_mode: str | float = "profile",
        criterion: str = "reml",
        budget: int = 200,
        tol: float = 1e-3,
    ):
        self.family = family
        self.tau_mode = tau_mode
        self.criterion = criterion
        self.budget = budget
        self.tol = tol

    def fit(self, response, mean_design, locations, distances=None) -> WorkingFit:
        gp = fit_gp_reml(
            response,
            mean_design,
            locations,
            family=self.family,
            tau_mode=self.tau_mode,
            criterion=self.criterion,
            budget=self.budget,
            tol=self.tol,
            distances=distances,
        )
        return WorkingFit(slope=gp.slope, trend=lambda S_new: krige_predict(gp, S_new), gp_fit=gp)


class FixedSpecWorkingModel:
    """First stage with frozen kernel parameters (GLS slope only)."""

    def __init__(self, spec: KernelSpec, criterion: str = "reml"):
        self.spec = spec
        self.criterion = criterion

    def fit(self, response, mean_design, locations, distances=None) -> WorkingFit:
        gp = fit_gp_given(
            response, mean_design, locations, self.spec, criterion=self.criterion, distances=distances
        )
        return WorkingFit(slope=gp.slope, trend=lambda S_new: krige_predict(gp, S_new), gp_fit=gp)


class ZeroWorkingModel:
    """Degenerate first stage: zero slopes and zero trends (reduction tests)."""

    def fit(self, response, mean_design, locations, distances=None) -> WorkingFit:
        X = np.asarray(mean_design)
        p = 1 if X.ndim == 1 else X.shape[1]
        return WorkingFit(
            slope=np.zeros(p),
            trend=lambda S_new: np.zeros(np.atleast_2d(S_new).shape[0]),
        )


# ---------------------------------------------------------------------------
# Double spatial regression
# ---------------------------------------------------------------------------


def _dsr_engine(
    dataset: Dataset,
    fold_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    working_model,
    ci_level: float,
    method: str,
    fold_of: np.ndarray | None = None,
) -> EstimateResult:
    """Shared practical-DSR pipeline over (predict-indices, fit-indices) pairs."""
    y, A, Z, S = dataset.y, dataset.A, dataset.Z, dataset.S
    n, l = A.shape
    Xz = _with_intercept(Z)

    g_hat = np.empty(n)
    cov_effect_y = np.empty(n)
    m_hat = np.empty((n, l))
    A_hat = np.empty((n, l))
    for idx, cidx in fold_pairs:
        D_c = cdist(S[cidx], S[cidx])
        fit_y = working_model.fit(y[cidx], np.column_stack([A[cidx], Xz[cidx]]), S[cidx], distances=D_c)
        theta00 = fit_y.slope[l:]
        g_hat[idx] = fit_y.trend(S[idx])
        cov_effect_y[idx] = Xz[idx] @ theta00
        for j in range(l):
            fit_a = working_model.fit(A[cidx, j], Xz[cidx], S[cidx], distances=D_c)
            m_hat[idx, j] = fit_a.trend(S[idx])
            A_hat[idx, j] = Xz[idx] @ fit_a.slope + m_hat[idx, j]

    V = A - A_hat
    detrended = y - cov_effect_y - g_hat
    VtA = V.T @ A
    _check_second_stage(VtA)
    beta = np.linalg.solve(VtA, V.T @ detrended)
    U = detrended - A @ beta
    var = sandwich_variance(V, A, U)
    lo, hi = _intervals(beta, var, ci_level)
    diagnostics = {"g_hat": g_hat, "m_hat": m_hat, "cov_effect_y": cov_effect_y}
    if fold_of is not None:
        diagnostics["fold_of"] = fold_of
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method=method,
        residuals_u=U,
        residuals_v=V,
        diagnostics=diagnostics,
    )


def dsr_crossfit(
    dataset: Dataset,
    K: int = 5,
    family: str = "matern",
    tau_mode: str | float = "profile",
    ci_level: float = 0.95,
    rng: RngStream | None = None,
    budget: int = 200,
    working_model=None,
) -> EstimateResult:
    """Double spatial regression with K-fold cross-fitting.

    For each fold, the working models for the response and each treatment are
    fit by REML on the fold's complement; the fold's spatial trends and
    covariate effects are predicted by universal Kriging, subtracted, and the
    coefficient is the residual-on-residual solution
    ``(V'A)^{-1} V'(y - Z theta - g)`` with sandwich variance.

    ``working_model`` replaces the REML first stage (used for reduction and
    fixed-hyperparameter tests).
    """
    n = dataset.n
    if not 2 <= K <= n:
        raise BadFoldCount(f"fold count must satisfy 2 <= K <= n, got K={K}, n={n}")
    if n / K < 20:
        warnings.warn(
            f"folds of size ~{n // K} are below the recommended minimum of 20",
            SmallFoldWarning,
        )
    rng = rng if rng is not None else rng_stream(0, 0)
    folds = partition_folds(n, K, rng)
    wm = working_model if working_model is not None else RemlWorkingModel(
        family=family, tau_mode=tau_mode, budget=budget
    )
    pairs = [(folds.indices(k), folds.complement(k)) for k in range(1, K + 1)]
    return _dsr_engine(dataset, pairs, wm, ci_level, method="dsr", fold_of=folds.fold_of)


def dsr_nocrossfit(
    dataset: Dataset,
    family: str = "matern",
    tau_mode: str | float = "profile",
    ci_level: float = 0.95,
    budget: int = 200,
    working_model=None,
) -> EstimateResult:
    """Double spatial regression fitted once on the full data (in-sample Kriging)."""
    n = dataset.n
    all_idx = np.arange(n)
    wm = working_model if working_model is not None else RemlWorkingModel(
        family=family, tau_mode=tau_mode, budget=budget
    )
    return _dsr_engine(dataset, [(all_idx, all_idx)], wm, ci_level, method="dsr-nocrossfit")


def dsr_theoretical(
    dataset: Dataset,
    K: int = 5,
    ci_level: float = 0.95,
    rng: RngStream | None = None,
    predictor=None,
) -> EstimateResult:
    """Theoretical double spatial regression (squared-exponential first stage).

    The response and regressors (covariates are folded into the regressor
    matrix and treated like treatments) are centered; per fold, the
    complement is split in half to select ``(lambda, gamma)`` on fixed grids,
    the regularized predictor is retrained on the full complement, and
    predictions are clipped to the training-response range.  The first stage
    regresses the response on the locations directly (marginal trend).
    Coefficient and variance use the ``(V'V)^{-1}`` bread.

    ``predictor(target_S, source_S, source_y, n_full, rng)`` overrides the
    grid-selected predictor (reduction tests).
    """
    n, l = dataset.n, dataset.n_treatments
    if not 2 <= K <= n:
        raise BadFoldCount(f"fold count must satisfy 2 <= K <= n, got K={K}, n={n}")
    if n / K < 20:
        warnings.warn(
            f"folds of size ~{n // K} are below the recommended minimum of 20",
            SmallFoldWarning,
        )
    rng = rng if rng is not None else rng_stream(0, 0)
    X = np.column_stack([dataset.A, dataset.Z])
    p = X.shape[1]
    yc = dataset.y - dataset.y.mean()
    Xc = X - X.mean(axis=0)
    S = dataset.S

    if predictor is None:

        def predictor(target_S, source_S, source_y, n_full, split):
            # Select (lambda, gamma) on the half-split, retrain on the full
            # fold complement, and clip to the training-response range.
            tr, va = split
            sel = tv_grid_select(source_S[tr], source_y[tr], source_S[va], source_y[va], n_full)
            pred = theoretical_krige(target_S, source_S, source_y, sel.gamma_star, sel.lambda_star)
            return clip_values(pred, float(source_y.min()), float(source_y.max()))

    folds = partition_folds(n, K, rng)
    h_hat = np.empty(n)
    m_hat = np.empty((n, p))
    for k in range(1, K + 1):
        idx, cidx = folds.indices(k), folds.complement(k)
        # One random half-split of the fold complement, shared by all targets.
        perm = rng.substream(k).permutation(cidx.size)
        split = (perm[: cidx.size // 2], perm[cidx.size // 2 :])
        h_hat[idx] = predictor(S[idx], S[cidx], yc[cidx], n, split)
        for j in range(p):
            m_hat[idx, j] = predictor(S[idx], S[cidx], Xc[cidx, j], n, split)

    V = Xc - m_hat
    VtV = V.T @ V
    _check_second_stage(VtV)
    beta_full = np.linalg.solve(VtV, V.T @ (yc - h_hat))
    U = yc - h_hat - V @ beta_full
    var_full = sandwich_variance(V, V, U)
    beta, var = beta_full[:l], var_full[:l, :l]
    lo, hi = _intervals(beta, var, ci_level)
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=ci_level,
        method="dsr-theory",
        residuals_u=U,
        residuals_v=V[:, :l],
        diagnostics={
            "h_hat": h_hat,
            "m_hat": m_hat,
            "beta_full": beta_full,
            "var_full": var_full,
            "fold_of": folds.fold_of,
        },
    )


# ---------------------------------------------------------------------------
# Aggregation and bootstrap
# ---------------------------------------------------------------------------


def median_aggregate(results: Sequence[EstimateResult]) -> EstimateResult:
    """Component-wise median of point and variance estimates across runs.

    An even number of runs averages the two middle order statistics.  The
    aggregated variance matrix is the entry-wise median (symmetrized); no
    positive-definiteness repair is attempted.  Residuals and diagnostics are
    carried from the first run.
    """
    if not results:
        raise EmptyInput("median_aggregate requires at least one result")
    if len(results) == 1:
        return results[0]
    first = results[0]
    l = first.beta_hat.size
    for r in results:
        if r.beta_hat.size != l:
            raise DomainError("results have inconsistent coefficient lengths")
    beta = np.median(np.stack([r.beta_hat for r in results]), axis=0)
    var = np.median(np.stack([r.var_hat for r in results]), axis=0)
    var = 0.5 * (var + var.T)
    lo, hi = _intervals(beta, var, first.level)
    return EstimateResult(
        beta_hat=beta,
        var_hat=var,
        ci_lower=lo,
        ci_upper=hi,
        level=first.level,
        method=first.method,
        residuals_u=first.residuals_u,
        residuals_v=first.residuals_v,
        diagnostics={"aggregated_runs": len(results)},
    )


def bootstrap_ci(
    estimator: Callable[[Dataset], np.ndarray],
    dataset: Dataset,
    B: int,
    level: float,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Percentile intervals from an i.i.d. row bootstrap.

    Draws ``B`` resamples with replacement, applies ``estimator`` to each,
    and returns the per-component percentile interval (linear interpolation
    between order statistics), the successful draws, and the failure count.
    No adjustment is made for spatial correlation between rows.
    """
    if B < 10:
        raise DomainError(f"bootstrap needs at least 10 replicates, got {B}")
    n = dataset.n
    draws = []
    failures = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        try:
            draws.append(np.atleast_1d(np.asarray(estimator(dataset.rows(idx)), dtype=float)))
        except DsrError:
            failures += 1
    if failures > 0.2 * B:
        raise BootstrapFailed(f"{failures}/{B} bootstrap replicates failed")
    stacked = np.stack(draws)
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(stacked, alpha, axis=0)
    upper = np.quantile(stacked, 1.0 - alpha, axis=0)
    return lower, upper, stacked, failures
