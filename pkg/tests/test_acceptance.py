"""Acceptance gate.

Two tiers mirror the project's sign-off checklist:

* always-on property criteria (6-13) that run in a few minutes, and
* desk-scale Monte Carlo replications of the confounding benchmarks
  (criteria 1-5 plus a normality sanity check), each 150 replications at
  n = 500, which take tens of minutes per scenario.

Every criterion prints one ``ACCEPTANCE <id>: PASS|FAIL`` line with the
measured quantities so a log scan shows the whole gate at a glance.  Worker
count comes from ``DSRKIT_THREADS`` (default: all cores, capped at 8);
results are identical for any worker count.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import math
import os
import warnings

import numpy as np
import pytest

from dsrkit.errors import SmallFoldWarning
from dsrkit.estimators import (
    Dataset,
    ZeroWorkingModel,
    dsr_crossfit,
    dsr_nocrossfit,
    dsr_theoretical,
    fit_gsem,
    fit_ols,
)
from dsrkit.harness import MethodConfig, run_study
from dsrkit.kernels import KernelSpec, correlation
from dsrkit.numerics import cholesky, gaussian_loglik, rng_stream
from dsrkit.simgen import make_scenario
from dsrkit.smoothers import fit_gp_given, grid_sizes, krige_predict, theoretical_krige

warnings.filterwarnings("ignore", category=SmallFoldWarning)

REPS = 150
N = 500
Z975 = 1.959963984540054


def _threads() -> int:
    env = os.environ.get("DSRKIT_THREADS")
    if env:
        return int(env)
    return max(1, min(8, os.cpu_count() or 1))


def _criterion(cid: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {cid}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {cid}: {detail}"


def _rows(table):
    return {r.method: r for r in table.rows}


# ---------------------------------------------------------------------------
# Desk-scale Monte Carlo runs (shared across criteria)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smooth_run():
    config = make_scenario("main", n=N, seed=0)
    # gSEM runs at the 300-basis smoother size of the benchmark it is
    # compared against; spatialplus rides along for the documentation row.
    methods = [
        MethodConfig("dsr"),
        MethodConfig("lmm"),
        MethodConfig("gsem", knots=300),
        MethodConfig("spatialplus"),
    ]
    return run_study(config, methods, reps=REPS, base_seed=20260809, threads=_threads(), keep_reps=True)


@pytest.fixture(scope="module")
def highvar_run():
    config = make_scenario("high_var_A", n=N, seed=0)
    methods = [MethodConfig("dsr"), MethodConfig("ols")]
    return run_study(config, methods, reps=REPS, base_seed=20260810, threads=_threads())


@pytest.fixture(scope="module")
def rough_run():
    config = make_scenario("main", n=N, kernel_A="rough", kernel_Z="rough", seed=0)
    methods = [MethodConfig("dsr"), MethodConfig("lmm")]
    return run_study(config, methods, reps=REPS, base_seed=20260811, threads=_threads())


@pytest.fixture(scope="module")
def veryrough_run():
    config = make_scenario("very_rough", n=N, seed=0)
    methods = [
        MethodConfig("ols"),
        MethodConfig("lmm"),
        MethodConfig("gsem"),
        MethodConfig("dsr"),
    ]
    return run_study(config, methods, reps=REPS, base_seed=20260812, threads=_threads())


# ---------------------------------------------------------------------------
# Always-on property criteria
# ---------------------------------------------------------------------------


class TestPropertyCriteria:
    def test_06_ols_reduction(self):
        worst = 0.0
        zero_predict = lambda target_S, source_S, source_y, n_full, split: np.zeros(
            np.atleast_2d(target_S).shape[0]
        )
        zero_smooth = lambda y, S: np.zeros(y.size)
        for seed in range(100):
            rng = rng_stream(6000 + seed, 0)
            n = 60
            A = rng.normal(size=(n, 1))
            y = rng.normal(size=n)
            ds = Dataset(y - y.mean(), A - A.mean(axis=0), None, rng.uniform(size=(n, 2)))
            ols_beta = fit_ols(ds).beta_hat
            cf = dsr_crossfit(ds, K=4, rng=rng_stream(seed, 1), working_model=ZeroWorkingModel())
            ncf = dsr_nocrossfit(ds, working_model=ZeroWorkingModel())
            th = dsr_theoretical(ds, K=3, rng=rng_stream(seed, 2), predictor=zero_predict)
            gs = fit_gsem(ds, smoother=zero_smooth, bootstrap_B=10, rng=rng_stream(seed, 3))
            for res in (cf, ncf, th, gs):
                worst = max(worst, float(np.abs(res.beta_hat - ols_beta).max()))
        _criterion("06", worst <= 1e-10, f"max |beta - beta_OLS| over 100 datasets = {worst:.2e} (<= 1e-10)")

    def test_07_crossfit_no_leakage(self):
        rng = rng_stream(7000, 0)
        n = 80
        S = rng.uniform(size=(n, 2))
        A = rng.normal(size=(n, 1))
        y = 0.5 * A[:, 0] + rng.normal(size=n)
        base = dsr_crossfit(Dataset(y, A, None, S), K=4, rng=rng_stream(7, 7), tau_mode=1.5, budget=60)
        k_idx = np.flatnonzero(base.diagnostics["fold_of"] == 1)
        y2 = y.copy()
        y2[k_idx] += 10.0 * rng.normal(size=k_idx.size)
        pert = dsr_crossfit(Dataset(y2, A, None, S), K=4, rng=rng_stream(7, 7), tau_mode=1.5, budget=60)
        same_g = np.array_equal(base.diagnostics["g_hat"][k_idx], pert.diagnostics["g_hat"][k_idx])
        same_m = np.array_equal(base.diagnostics["m_hat"][k_idx], pert.diagnostics["m_hat"][k_idx])

        base_t = dsr_theoretical(Dataset(y, A, None, S), K=4, rng=rng_stream(7, 8))
        k_t = np.flatnonzero(base_t.diagnostics["fold_of"] == 1)
        y3 = y.copy()
        y3[k_t] += 10.0 * rng.normal(size=k_t.size)
        pert_t = dsr_theoretical(Dataset(y3, A, None, S), K=4, rng=rng_stream(7, 8))
        same_t = np.array_equal(base_t.diagnostics["m_hat"][k_t], pert_t.diagnostics["m_hat"][k_t])
        _criterion(
            "07",
            same_g and same_m and same_t,
            f"fold predictions invariant to in-fold perturbation (g: {same_g}, m: {same_m}, theory m: {same_t})",
        )

    def test_08_kriging_interpolation(self):
        rng = rng_stream(8000, 0)
        n = 30
        S = rng.uniform(size=(n, 2))
        spec = KernelSpec("matern", 0.3, 0.5, omega2=1.0, sigma2=0.0)
        from dsrkit.kernels import correlation_matrix

        y = cholesky(correlation_matrix(spec, S, S)).lower @ rng.normal(size=n)
        fit = fit_gp_given(y, np.ones((n, 1)), S, spec)
        krige_err = float(
            np.abs(np.ones((n, 1)) @ fit.slope + krige_predict(fit, S) - y).max()
        )
        theory_err = float(np.abs(theoretical_krige(S, S, y, gamma=0.7, lam=0.0) - y).max())
        _criterion(
            "08",
            krige_err <= 1e-6 and theory_err <= 1e-6,
            f"zero-nugget predictors reproduce training data (krige {krige_err:.2e}, ridge {theory_err:.2e}; <= 1e-6)",
        )

    def test_09_sandwich_brute_force(self):
        from dsrkit.estimators import sandwich_variance

        rng = rng_stream(9000, 0)
        worst = 0.0
        symmetric = True
        for _ in range(20):
            n, l = 50, 3
            V = rng.normal(size=(n, l))
            A = V + 0.3 * rng.normal(size=(n, l))
            U = rng.normal(size=n)
            meat = np.zeros((l, l))
            for i in range(n):
                meat += U[i] ** 2 * np.outer(V[i], V[i])
            bread = np.linalg.inv(V.T @ A)
            brute = bread @ meat @ bread.T
            brute = 0.5 * (brute + brute.T)
            got = sandwich_variance(V, A, U)
            worst = max(worst, float(np.abs(got - brute).max()))
            symmetric = symmetric and np.array_equal(got, got.T)
        _criterion("09", worst <= 1e-10 and symmetric, f"max |sandwich - loop| = {worst:.2e} (<= 1e-10), symmetric: {symmetric}")

    def test_10_loglik_explicit_inverse(self):
        rng = rng_stream(10000, 0)
        worst = 0.0
        for _ in range(50):
            b = rng.normal(size=(5, 5))
            cov = b @ b.T + 5 * np.eye(5)
            r = rng.normal(size=5)
            brute = -0.5 * (
                5 * math.log(2 * math.pi) + math.log(np.linalg.det(cov)) + r @ np.linalg.inv(cov) @ r
            )
            worst = max(worst, abs(gaussian_loglik(cov, r) - brute))
        _criterion("10", worst <= 1e-8, f"max |loglik - explicit inverse| = {worst:.2e} (<= 1e-8)")

    def test_11_matern_closed_forms(self):
        gamma = 0.41
        h = np.linspace(0.0, 3.0 * gamma, 100)
        k_half = KernelSpec("matern", gamma, 0.5)
        err_half = max(abs(correlation(k_half, x) - math.exp(-x / gamma)) for x in h)
        k_three = KernelSpec("matern", gamma, 1.5)
        err_three = max(
            abs(
                correlation(k_three, x)
                - (1.0 + math.sqrt(3.0) * x / gamma) * math.exp(-math.sqrt(3.0) * x / gamma)
            )
            for x in h
        )
        _criterion(
            "11",
            err_half <= 1e-12 and err_three <= 1e-12,
            f"closed-form gaps on 100-point grid: tau=0.5 {err_half:.2e}, tau=1.5 {err_three:.2e} (<= 1e-12)",
        )

    def test_12_thread_count_determinism(self):
        config = make_scenario("main", n=60, seed=0)
        methods = [MethodConfig("ols"), MethodConfig("gsem", bootstrap=10, knots=10)]
        tables = [
            run_study(config, methods, reps=10, base_seed=1212, threads=t) for t in (1, 4, 8)
        ]
        same = tables[0].rows == tables[1].rows == tables[2].rows
        _criterion("12", same, "10-rep study bit-identical across thread counts {1, 4, 8}")

    def test_13_grid_sizing(self):
        got16, got100 = grid_sizes(16), grid_sizes(100)
        _criterion(
            "13",
            got16 == (8, 2) and got100 == (50, 5),
            f"grid sizes n=16 -> {got16} (want (8, 2)), n=100 -> {got100} (want (50, 5))",
        )


# ---------------------------------------------------------------------------
# Desk-scale replication criteria
# ---------------------------------------------------------------------------


class TestDeskScaleCriteria:
    def test_01_smooth_smooth_benchmark(self, smooth_run):
        rows = _rows(smooth_run)
        dsr, lmm = rows["dsr"], rows["lmm"]
        ok = (
            abs(dsr.rel_bias) <= 0.20
            and dsr.coverage >= 0.85
            and abs(lmm.rel_bias) >= 0.5
            and lmm.coverage <= 0.35
            and abs(dsr.bias) <= 0.4 * abs(lmm.bias)
        )
        _criterion(
            "01",
            ok,
            f"smooth/smooth: DSR rel_bias {dsr.rel_bias:+.3f} (|.|<=0.20) cvg {dsr.coverage:.3f} (>=0.85); "
            f"LMM rel_bias {lmm.rel_bias:+.3f} (|.|>=0.5) cvg {lmm.coverage:.3f} (<=0.35); "
            f"|bias| ratio {abs(dsr.bias) / abs(lmm.bias):.3f} (<=0.4)",
        )

    def test_02_high_variance_benchmark(self, highvar_run):
        rows = _rows(highvar_run)
        dsr, ols = rows["dsr"], rows["ols"]
        ok = dsr.coverage >= 0.88 and abs(dsr.bias) <= 0.05 and ols.coverage <= 0.30
        _criterion(
            "02",
            ok,
            f"high-variance: DSR cvg {dsr.coverage:.3f} (>=0.88) bias {dsr.bias:+.4f} (|.|<=0.05); "
            f"OLS cvg {ols.coverage:.3f} (<=0.30)",
        )

    def test_03_rough_rough_mse_ordering(self, rough_run):
        rows = _rows(rough_run)
        dsr, lmm = rows["dsr"], rows["lmm"]
        # documented negative result: no method reaches nominal coverage here
        _criterion(
            "03",
            dsr.mse <= lmm.mse,
            f"rough/rough: DSR MSE {dsr.mse:.3f} <= LMM MSE {lmm.mse:.3f}; "
            f"coverages (documentation): DSR {dsr.coverage:.3f}, LMM {lmm.coverage:.3f}",
        )

    def test_04_gsem_vs_dsr_ci_length(self, smooth_run):
        rows = _rows(smooth_run)
        gsem, dsr = rows["gsem"], rows["dsr"]
        sp = rows["spatialplus"]
        _criterion(
            "04",
            gsem.ci_length > dsr.ci_length,
            f"smooth/smooth: gSEM CI length {gsem.ci_length:.3f} > DSR CI length {dsr.ci_length:.3f} "
            f"(documentation: spatialplus cvg {sp.coverage:.3f}, CI length {sp.ci_length:.3f})",
        )

    def test_05_very_rough_negative_result(self, veryrough_run):
        rows = _rows(veryrough_run)
        detail = ", ".join(f"{m}: {r.rel_bias:+.3f}" for m, r in rows.items())
        ok = all(abs(r.rel_bias) >= 0.5 for r in rows.values())
        _criterion("05", ok, f"very-rough rel_bias per method (all |.| >= 0.5): {detail}")

    def test_qq_standardized_estimates_skewness(self, smooth_run):
        betas, ses = [], []
        for rep in smooth_run.per_rep:
            o = rep.outcomes["dsr"]
            if o.ok:
                betas.append(o.beta)
                ses.append((o.ci_upper - o.ci_lower) / (2.0 * Z975))
        z = (np.asarray(betas) - 0.5) / np.asarray(ses)
        centered = z - z.mean()
        skew = float(np.mean(centered**3) / np.mean(centered**2) ** 1.5)
        _criterion(
            "QQ",
            abs(skew) <= 0.5,
            f"skewness of standardized smooth/smooth estimates over {len(betas)} reps = {skew:+.3f} (|.| <= 0.5)",
        )
