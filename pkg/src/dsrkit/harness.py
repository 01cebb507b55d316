"""Monte Carlo study runner.

A study is a pure function of ``(scenario config, method configs, reps,
base_seed)``: each replication derives its own counter-based stream, so the
resulting metrics table is bit-identical for any worker count.  BLAS is
pinned to a single thread around every replication so that linear algebra
results cannot depend on the execution schedule; parallelism lives entirely
at the replication level (process pool).

Estimator failures inside a replication are first-class: they are recorded
per method with the error name and excluded from the metrics, never silently
dropped.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import AllFailed, DomainError, DsrError
from .estimators import (
    Dataset,
    EstimateResult,
    dsr_crossfit,
    dsr_nocrossfit,
    dsr_theoretical,
    fit_gsem,
    fit_lmm,
    fit_ols,
    fit_spatialplus,
    median_aggregate,
)
from .numerics import RngStream, rng_stream
from .simgen import ScenarioConfig, gen_scenario

__all__ = [
    "METHOD_NAMES",
    "MethodConfig",
    "MethodOutcome",
    "RepResult",
    "MetricsRow",
    "MetricsTable",
    "run_replication",
    "compute_metrics",
    "run_study",
]

METHOD_NAMES = ("ols", "lmm", "gsem", "spatialplus", "dsr", "dsr-nocrossfit", "dsr-theory")

CI_LEVEL = 0.95  # fixed throughout the study harness


@dataclass(frozen=True)
class MethodConfig:
    """Declarative estimator configuration for studies and the CLI."""

    name: str
    folds: int = 5
    runs: int = 1
    tau_mode: str | float = "profile"
    family: str = "matern"
    smoother: str = "spline"
    bootstrap: int = 100
    robust: bool = False
    budget: int = 200
    knots: int = 100
    label: str | None = None

    def __post_init__(self) -> None:
        if self.name not in METHOD_NAMES:
            raise DomainError(f"unknown method {self.name!r}; expected one of {METHOD_NAMES}")
        if self.runs < 1:
            raise DomainError(f"runs must be at least 1, got {self.runs}")

    @property
    def display(self) -> str:
        return self.label if self.label else self.name


def run_method(dataset: Dataset, mc: MethodConfig, rng: RngStream, level: float = CI_LEVEL) -> EstimateResult:
    """Dispatch one configured estimator on one dataset."""
    if mc.name == "ols":
        return fit_ols(dataset, robust=mc.robust, ci_level=level)
    if mc.name == "lmm":
        return fit_lmm(dataset, family=mc.family, tau_mode=mc.tau_mode, ci_level=level, budget=mc.budget)
    if mc.name == "gsem":
        return fit_gsem(
            dataset,
            smoother=mc.smoother,
            bootstrap_B=mc.bootstrap,
            ci_level=level,
            rng=rng,
            knot_count=mc.knots,
            family=mc.family,
            tau_mode=mc.tau_mode,
            budget=mc.budget,
        )
    if mc.name == "spatialplus":
        return fit_spatialplus(
            dataset,
            smoother=mc.smoother,
            bootstrap_B=mc.bootstrap,
            ci_level=level,
            rng=rng,
            knot_count=mc.knots,
            family=mc.family,
            tau_mode=mc.tau_mode,
            budget=mc.budget,
        )
    if mc.name == "dsr":
        runs = [
            dsr_crossfit(
                dataset,
                K=mc.folds,
                family=mc.family,
                tau_mode=mc.tau_mode,
                ci_level=level,
                rng=rng.substream(r),
                budget=mc.budget,
            )
            for r in range(mc.runs)
        ]
        return median_aggregate(runs)
    if mc.name == "dsr-nocrossfit":
        return dsr_nocrossfit(
            dataset, family=mc.family, tau_mode=mc.tau_mode, ci_level=level, budget=mc.budget
        )
    if mc.name == "dsr-theory":
        return dsr_theoretical(dataset, K=mc.folds, ci_level=level, rng=rng)
    raise DomainError(f"unknown method {mc.name!r}")  # pragma: no cover


@dataclass(frozen=True)
class MethodOutcome:
    ok: bool
    beta: float = math.nan
    ci_lower: float = math.nan
    ci_upper: float = math.nan
    error: str = ""


@dataclass(frozen=True)
class RepResult:
    rep_index: int
    outcomes: dict  # display name -> MethodOutcome


def run_replication(
    config: ScenarioConfig,
    methods: list[MethodConfig],
    rep_index: int,
    base_seed: int,
) -> RepResult:
    """Generate one dataset and run every configured method on it.

    The data stream is ``rng_stream(base_seed, rep_index)``; method ``m``
    draws from the substream keyed ``(rep_index, m)``.  Failures are captured
    per method and do not abort the replication.
    """
    if not methods:
        raise DomainError("at least one method is required")
    data_rng = rng_stream(base_seed, rep_index)
    dataset, _ = gen_scenario(config, data_rng)
    outcomes: dict[str, MethodOutcome] = {}
    for m_slot, mc in enumerate(methods):
        method_rng = data_rng.substream(m_slot)
        try:
            res = run_method(dataset, mc, method_rng)
            outcomes[mc.display] = MethodOutcome(
                ok=True,
                beta=float(res.beta_hat[0]),
                ci_lower=float(res.ci_lower[0]),
                ci_upper=float(res.ci_upper[0]),
            )
        except (DsrError, np.linalg.LinAlgError) as exc:
            outcomes[mc.display] = MethodOutcome(ok=False, error=type(exc).__name__)
    return RepResult(rep_index=rep_index, outcomes=outcomes)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    bias: float
    rel_bias: float
    mse: float
    ci_length: float
    coverage: float
    power: float
    n_ok: int
    n_fail: int


@dataclass(frozen=True)
class MetricsTable:
    rows: list[MetricsRow]
    reps: int
    base_seed: int
    per_rep: list[RepResult] | None = None


@dataclass(frozen=True)
class MetricsRowStats:
    bias: float
    rel_bias: float
    mse: float
    ci_length: float
    coverage: float
    power: float


def compute_metrics(estimates: list[tuple[float, float, float]], beta0: float) -> MetricsRowStats:
    """Bias / MSE / CI metrics from per-replication (beta, lo, hi) triples."""
    if not estimates:
        raise AllFailed("no successful estimates to summarize")
    beta = np.array([e[0] for e in estimates])
    lo = np.array([e[1] for e in estimates])
    hi = np.array([e[2] for e in estimates])
    bias = float(np.mean(beta) - beta0)
    return MetricsRowStats(
        bias=bias,
        rel_bias=bias / beta0 if beta0 != 0.0 else math.nan,
        mse=float(np.mean((beta - beta0) ** 2)),
        ci_length=float(np.mean(hi - lo)),
        coverage=float(np.mean((lo <= beta0) & (beta0 <= hi))),
        power=float(np.mean((lo > 0.0) | (hi < 0.0))),
    )


def _replication_worker(args) -> RepResult:
    config, methods, rep_index, base_seed = args
    with threadpool_limits(limits=1):
        return run_replication(config, methods, rep_index, base_seed)


def run_study(
    config: ScenarioConfig,
    methods: list[MethodConfig],
    reps: int,
    base_seed: int,
    threads: int = 1,
    keep_reps: bool = False,
    progress=None,
) -> MetricsTable:
    """Run ``reps`` replications of (scenario x methods), aggregate metrics.

    Replications are distributed over up to ``threads`` worker processes;
    the result is identical for any thread count.  A method that fails in
    every replication gets a row of NaN metrics with ``n_ok = 0``.
    """
    if reps < 1:
        raise DomainError(f"reps must be positive, got {reps}")
    labels = [m.display for m in methods]
    if len(set(labels)) != len(labels):
        raise DomainError("method display names must be unique (set `label` to disambiguate)")

    tasks = [(config, methods, r, base_seed) for r in range(reps)]
    results: list[RepResult] = []
    if threads > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=threads, mp_context=get_context("fork")) as pool:
            for rep in pool.map(_replication_worker, tasks):
                results.append(rep)
                if progress:
                    progress(len(results), reps)
    else:
        for task in tasks:
            results.append(_replication_worker(task))
            if progress:
                progress(len(results), reps)
    results.sort(key=lambda r: r.rep_index)

    rows = []
    for label in labels:
        ok = [r.outcomes[label] for r in results if r.outcomes[label].ok]
        n_fail = reps - len(ok)
        if ok:
            stats = compute_metrics([(o.beta, o.ci_lower, o.ci_upper) for o in ok], config.beta0)
            rows.append(
                MetricsRow(
                    method=label,
                    bias=stats.bias,
                    rel_bias=stats.rel_bias,
                    mse=stats.mse,
                    ci_length=stats.ci_length,
                    coverage=stats.coverage,
                    power=stats.power,
                    n_ok=len(ok),
                    n_fail=n_fail,
                )
            )
        else:
            rows.append(
                MetricsRow(
                    method=label,
                    bias=math.nan,
                    rel_bias=math.nan,
                    mse=math.nan,
                    ci_length=math.nan,
                    coverage=math.nan,
                    power=math.nan,
                    n_ok=0,
                    n_fail=reps,
                )
            )
    return MetricsTable(rows=rows, reps=reps, base_seed=base_seed, per_rep=results if keep_reps else None)
