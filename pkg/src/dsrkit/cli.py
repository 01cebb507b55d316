"""Batch command-line front end.

Three commands: ``simulate`` runs Monte Carlo studies from a TOML config (or
a previously written ``run_manifest.json``, which reproduces the study
byte-for-byte), ``fit`` applies one estimator to a CSV of point-referenced
data, and ``report`` renders the metrics tables as CSV or markdown with an
optional sampling-distribution density plot (SVG).

Exit codes: 0 success, 1 runtime estimator failure, 2 usage/config error.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from .errors import DsrError
from .estimators import Dataset
from .harness import METHOD_NAMES, MethodConfig, MetricsTable, run_method, run_study
from .numerics import rng_stream
from .simgen import KERNEL_ALIASES, SCENARIO_NAMES, ScenarioConfig, make_scenario

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

METRICS_COLUMNS = ("method", "bias", "rel_bias", "mse", "ci_length", "coverage", "power", "n_ok", "n_fail")

_STUDY_KEYS = {"reps", "seed", "threads", "out", "keep_reps"}
_SCENARIO_KEYS = {"name", "label", "n", "rho", "sigma2_A", "sigma2_Y", "beta0", "kernel_A", "kernel_Z"}
_METHOD_KEYS = {
    "name",
    "label",
    "folds",
    "runs",
    "tau_mode",
    "family",
    "smoother",
    "bootstrap",
    "robust",
    "budget",
    "knots",
}


def _fmt(x) -> str:
    """Fixed 6-significant-digit formatting for all emitted numbers."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if math.isnan(xf):
        return "nan"
    return f"{xf:.6g}"


def _usage_error(message: str) -> "click.UsageError":
    err = click.UsageError(message)
    err.exit_code = 2
    return err


def _reject_unknown(table: dict, allowed: set, context: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise _usage_error(f"{context}: unknown key(s) {sorted(unknown)}; allowed keys are {sorted(allowed)}")


def _load_config(path: Path) -> dict:
    if not path.exists():
        raise _usage_error(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path, "rb") as fh:
            doc = json.load(fh)
        return doc.get("config", doc)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise _usage_error(f"{path}: {exc}") from exc


def _parse_study(doc: dict) -> dict:
    _reject_unknown(doc, {"study", "scenario", "method"}, "config")
    study = doc.get("study", {})
    _reject_unknown(study, _STUDY_KEYS, "[study]")
    scenarios = doc.get("scenario", [])
    methods = doc.get("method", [])
    if not scenarios:
        raise _usage_error("config declares no [[scenario]] tables")
    if not methods:
        raise _usage_error("config declares no [[method]] tables")

    parsed_scenarios = []
    for i, sc in enumerate(scenarios):
        _reject_unknown(sc, _SCENARIO_KEYS, f"[[scenario]] #{i + 1}")
        name = sc.get("name")
        if name not in SCENARIO_NAMES:
            raise _usage_error(
                f"[[scenario]] #{i + 1}: unknown scenario {name!r}; known: {', '.join(SCENARIO_NAMES)}"
            )
        label = sc.get("label", name)
        overrides = {k: v for k, v in sc.items() if k not in ("name", "label")}
        for key in ("kernel_A", "kernel_Z"):
            if key in overrides and overrides[key] not in KERNEL_ALIASES:
                raise _usage_error(
                    f"[[scenario]] #{i + 1}: {key} must be one of {sorted(KERNEL_ALIASES)}"
                )
        try:
            config = make_scenario(name, **overrides)
        except DsrError as exc:
            raise _usage_error(f"[[scenario]] #{i + 1}: {exc}") from exc
        parsed_scenarios.append((label, config))
    labels = [lab for lab, _ in parsed_scenarios]
    if len(set(labels)) != len(labels):
        raise _usage_error("scenario labels must be unique")

    parsed_methods = []
    for i, m in enumerate(methods):
        _reject_unknown(m, _METHOD_KEYS, f"[[method]] #{i + 1}")
        if m.get("name") not in METHOD_NAMES:
            raise _usage_error(
                f"[[method]] #{i + 1}: unknown method {m.get('name')!r}; known: {', '.join(METHOD_NAMES)}"
            )
        kwargs = dict(m)
        if isinstance(kwargs.get("tau_mode"), str) and kwargs["tau_mode"] != "profile":
            try:
                kwargs["tau_mode"] = float(kwargs["tau_mode"])
            except ValueError:
                raise _usage_error(
                    f"[[method]] #{i + 1}: tau_mode must be 'profile' or a half-integer smoothness"
                ) from None
        try:
            parsed_methods.append(MethodConfig(**kwargs))
        except (DsrError, TypeError) as exc:
            raise _usage_error(f"[[method]] #{i + 1}: {exc}") from exc

    return {
        "reps": int(study.get("reps", 400)),
        "seed": int(study.get("seed", 0)),
        "threads": study.get("threads"),
        "out": study.get("out"),
        "keep_reps": bool(study.get("keep_reps", False)),
        "scenarios": parsed_scenarios,
        "methods": parsed_methods,
    }


def _scenario_to_doc(label: str, config: ScenarioConfig) -> dict:
    doc = {
        "name": config.name,
        "label": label,
        "n": config.n,
        "rho": config.rho,
        "sigma2_A": config.sigma2_A,
        "sigma2_Y": config.sigma2_Y,
        "beta0": config.beta0,
    }
    aliases = {spec: alias for alias, spec in KERNEL_ALIASES.items()}
    for key, spec in (("kernel_A", config.kernel_A), ("kernel_Z", config.kernel_Z)):
        doc[key] = aliases.get(spec, asdict(spec))
    return doc


def _method_to_doc(mc: MethodConfig) -> dict:
    doc = asdict(mc)
    if doc["label"] is None:
        doc.pop("label")
    return doc


def _write_metrics_csv(path: Path, table: MetricsTable) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in table.rows:
        lines.append(
            ",".join(
                [
                    row.method,
                    _fmt(row.bias),
                    _fmt(row.rel_bias),
                    _fmt(row.mse),
                    _fmt(row.ci_length),
                    _fmt(row.coverage),
                    _fmt(row.power),
                    str(row.n_ok),
                    str(row.n_fail),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _write_reps_csv(path: Path, table: MetricsTable) -> None:
    lines = ["method,rep,beta_hat,ci_lower,ci_upper"]
    for rep in table.per_rep or []:
        for label, outcome in rep.outcomes.items():
            if outcome.ok:
                lines.append(
                    f"{label},{rep.rep_index},{_fmt(outcome.beta)},{_fmt(outcome.ci_lower)},{_fmt(outcome.ci_upper)}"
                )
            else:
                lines.append(f"{label},{rep.rep_index},nan,nan,nan")
    path.write_text("\n".join(lines) + "\n")


def _default_threads(option_value) -> int:
    if option_value is not None:
        return int(option_value)
    env = os.environ.get("DSRKIT_THREADS")
    return int(env) if env else 1


@click.group()
def main() -> None:
    """Spatial-confounding estimation toolkit."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None)
@click.option("--reps", type=int, default=None, help="Override replication count.")
@click.option("--seed", type=int, default=None, help="Override base seed.")
@click.option("--threads", type=int, default=None, help="Worker processes (or DSRKIT_THREADS).")
@click.option("--keep-reps", is_flag=True, default=False, help="Persist per-replication estimates.")
def simulate(config_path: Path, out_dir, reps, seed, threads, keep_reps) -> None:
    """Run the simulation study described by a TOML config or a manifest."""
    parsed = _parse_study(_load_config(config_path))
    if reps is not None:
        parsed["reps"] = reps
    if seed is not None:
        parsed["seed"] = seed
    if threads is not None:
        parsed["threads"] = threads
    if keep_reps:
        parsed["keep_reps"] = True
    out = Path(out_dir) if out_dir else Path(parsed["out"] or "dsrkit_results")
    n_threads = _default_threads(parsed["threads"])

    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": {
                "study": {
                    "reps": parsed["reps"],
                    "seed": parsed["seed"],
                    "threads": n_threads,
                    "keep_reps": parsed["keep_reps"],
                },
                "scenario": [_scenario_to_doc(lab, cfg) for lab, cfg in parsed["scenarios"]],
                "method": [_method_to_doc(m) for m in parsed["methods"]],
            }
        }
        for label, config in parsed["scenarios"]:
            click.echo(f"scenario {label}: {parsed['reps']} reps on {n_threads} thread(s)")
            table = run_study(
                config,
                parsed["methods"],
                reps=parsed["reps"],
                base_seed=parsed["seed"],
                threads=n_threads,
                keep_reps=parsed["keep_reps"],
            )
            scenario_dir = out / label
            scenario_dir.mkdir(parents=True, exist_ok=True)
            _write_metrics_csv(scenario_dir / "metrics.csv", table)
            if parsed["keep_reps"]:
                _write_reps_csv(scenario_dir / "reps.csv", table)
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except DsrError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote results under {out}")


def _read_fit_csv(path: Path, columns: list[str]):
    import pandas as pd

    if not path.exists():
        raise _usage_error(f"data file not found: {path}")
    frame = pd.read_csv(path)
    missing_cols = [c for c in columns if c not in frame.columns]
    if missing_cols:
        raise _usage_error(f"column(s) not present in {path.name}: {', '.join(missing_cols)}")
    sub = frame[columns]
    bad_rows = sub.index[sub.isna().any(axis=1)].tolist()
    if bad_rows:
        rows = ", ".join(str(r + 2) for r in bad_rows[:20])  # +2: header plus 1-based
        raise _usage_error(f"missing values in rows (file line numbers): {rows}")
    return sub


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(path_type=Path))
@click.option("--response", required=True, help="Response column name.")
@click.option("--treatments", required=True, help="Comma-separated treatment columns.")
@click.option("--covariates", default="", help="Comma-separated covariate columns.")
@click.option("--coords", required=True, help="Comma-separated coordinate columns, e.g. x,y.")
@click.option("--method", "method_name", required=True, type=click.Choice(METHOD_NAMES))
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--runs", type=int, default=1, show_default=True, help="Random-split repetitions (median-aggregated).")
@click.option("--level", type=float, default=0.95, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tau", default="profile", show_default=True, help="'profile' or a fixed half-integer smoothness.")
@click.option("--bootstrap", type=int, default=100, show_default=True)
@click.option(
    "--diagnostics",
    "diag_path",
    type=click.Path(path_type=Path),
    default=None,
    help="Residuals CSV path (default: <data>.residuals.csv).",
)
def fit(
    data_path: Path,
    response: str,
    treatments: str,
    covariates: str,
    coords: str,
    method_name: str,
    folds: int,
    runs: int,
    level: float,
    seed: int,
    tau,
    bootstrap: int,
    diag_path,
) -> None:
    """Fit one estimator to user-supplied CSV data.

    For severe-confounding analyses with many folds, the preset used in
    practice is ``--method dsr --folds 45 --runs 11`` (median-aggregated).
    """
    treat_cols = [c.strip() for c in treatments.split(",") if c.strip()]
    cov_cols = [c.strip() for c in covariates.split(",") if c.strip()]
    coord_cols = [c.strip() for c in coords.split(",") if c.strip()]
    if len(coord_cols) != 2:
        raise _usage_error(f"--coords expects two columns, got {coord_cols}")
    if not treat_cols:
        raise _usage_error("--treatments expects at least one column")
    columns = [response, *treat_cols, *cov_cols, *coord_cols]
    frame = _read_fit_csv(data_path, columns)

    dataset = Dataset(
        frame[response].to_numpy(float),
        frame[treat_cols].to_numpy(float),
        frame[cov_cols].to_numpy(float) if cov_cols else None,
        frame[coord_cols].to_numpy(float),
    )
    tau_mode = tau if tau == "profile" else float(tau)
    mc = MethodConfig(
        name=method_name, folds=folds, runs=runs, tau_mode=tau_mode, bootstrap=bootstrap
    )
    try:
        result = run_method(dataset, mc, rng_stream(seed, 0), level=level)
    except DsrError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)

    se = result.se
    click.echo(f"method: {result.method}   n={dataset.n}   level={level:g}")
    header = f"{'treatment':<20}{'beta_hat':>14}{'se':>14}{'ci_lower':>14}{'ci_upper':>14}"
    click.echo(header)
    for j, name in enumerate(treat_cols):
        click.echo(
            f"{name:<20}{_fmt(result.beta_hat[j]):>14}{_fmt(se[j]):>14}"
            f"{_fmt(result.ci_lower[j]):>14}{_fmt(result.ci_upper[j]):>14}"
        )
    diag = Path(diag_path) if diag_path else data_path.with_suffix(".residuals.csv")
    if result.residuals_u is not None:
        lines = ["row,residual_u" + "".join(f",residual_v_{c}" for c in treat_cols)]
        rv = result.residuals_v
        for i in range(dataset.n):
            vals = [str(i + 1), _fmt(result.residuals_u[i])]
            if rv is not None:
                vals.extend(_fmt(rv[i, j]) for j in range(len(treat_cols)))
            lines.append(",".join(vals))
        diag.write_text("\n".join(lines) + "\n")
        click.echo(f"residual diagnostics written to {diag}")


def _render_markdown(rows: list[dict]) -> str:
    header = "| Method | Bias | Rel. Bias | MSE | CI Length | CVG | Power |"
    rule = "|---|---|---|---|---|---|---|"
    lines = [header, rule]
    for r in rows:
        lines.append(
            f"| {r['method']} | {r['bias']} | {r['rel_bias']} | {r['mse']} "
            f"| {r['ci_length']} | {r['coverage']} | {r['power']} |"
        )
    return "\n".join(lines)


def _density_svg(path: Path, reps_by_method: dict, beta0: float) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    from scipy.stats import gaussian_kde

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for method, values in reps_by_method.items():
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        if values.size < 3 or np.ptp(values) == 0.0:
            continue
        kde = gaussian_kde(values - beta0)
        lo, hi = (values - beta0).min(), (values - beta0).max()
        pad = 0.2 * max(hi - lo, 1e-6)
        grid = np.linspace(lo - pad, hi + pad, 256)
        ax.plot(grid, kde(grid), label=method)
    ax.axvline(0.0, color="black", linewidth=0.8, linestyle=":")
    ax.set_xlabel("estimate minus true coefficient")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(path_type=Path))
@click.option("--format", "fmt", type=click.Choice(["csv", "md"]), default="md", show_default=True)
@click.option("--plot", is_flag=True, default=False, help="Write a density SVG per scenario (needs reps.csv).")
def report(in_dir: Path, fmt: str, plot: bool) -> None:
    """Render metrics tables from a simulate output directory."""
    in_dir = Path(in_dir)
    metrics_files = sorted(in_dir.glob("*/metrics.csv"))
    if in_dir.joinpath("metrics.csv").exists():
        metrics_files.insert(0, in_dir / "metrics.csv")
    if not metrics_files:
        raise _usage_error(f"no metrics.csv found under {in_dir}")

    beta0_by_label = {}
    manifest_path = in_dir / "run_manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for sc in manifest.get("config", {}).get("scenario", []):
            beta0_by_label[sc.get("label")] = float(sc.get("beta0", 0.5))

    for mf in metrics_files:
        label = mf.parent.name if mf.parent != in_dir else in_dir.name
        text = mf.read_text().strip().splitlines()
        cols = text[0].split(",")
        rows = [dict(zip(cols, line.split(","))) for line in text[1:]]
        click.echo(f"## {label}")
        if fmt == "md":
            click.echo(_render_markdown(rows))
        else:
            click.echo("\n".join([text[0], *text[1:]]))
        click.echo("")
        if plot:
            reps_file = mf.parent / "reps.csv"
            if not reps_file.exists():
                raise _usage_error(
                    f"--plot needs per-replication estimates; rerun simulate with --keep-reps "
                    f"(missing {reps_file})"
                )
            reps_by_method: dict[str, list[float]] = {}
            for line in reps_file.read_text().strip().splitlines()[1:]:
                method, _, beta, _, _ = line.split(",")
                if beta != "nan":
                    reps_by_method.setdefault(method, []).append(float(beta))
            svg_path = mf.parent / "density.svg"
            _density_svg(svg_path, reps_by_method, beta0_by_label.get(label, 0.5))
            click.echo(f"density plot written to {svg_path}")


if __name__ == "__main__":
    main()
