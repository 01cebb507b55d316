from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from dsrkit.cli import main

SMOKE_CONFIG = """
[study]
reps = 3
seed = 7
threads = 1

[[scenario]]
name = "main"
label = "smoke"
n = 40

[[method]]
name = "ols"

[[method]]
name = "gsem"
bootstrap = 10
knots = 8
"""


@pytest.fixture()
def runner():
    return CliRunner()


def _write_config(tmp_path: Path, text: str = SMOKE_CONFIG) -> Path:
    path = tmp_path / "study.toml"
    path.write_text(text)
    return path


class TestSimulate:
    def test_smoke_run_writes_outputs(self, runner, tmp_path):
        cfg = _write_config(tmp_path)
        out = tmp_path / "results"
        result = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        metrics = out / "smoke" / "metrics.csv"
        assert metrics.exists()
        header = metrics.read_text().splitlines()[0]
        assert header == "method,bias,rel_bias,mse,ci_length,coverage,power,n_ok,n_fail"
        assert (out / "run_manifest.json").exists()

    def test_missing_config_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["simulate", "--config", str(tmp_path / "absent.toml")])
        assert result.exit_code == 2

    def test_unknown_key_rejected(self, runner, tmp_path):
        cfg = _write_config(tmp_path, SMOKE_CONFIG + "\n[[method]]\nname = 'ols'\nbogus = 1\n")
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "bogus" in result.output

    def test_unknown_scenario_rejected(self, runner, tmp_path):
        bad = SMOKE_CONFIG.replace('name = "main"', 'name = "nope"')
        cfg = _write_config(tmp_path, bad)
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "nope" in result.output

    def test_toml_syntax_error_line_anchored(self, runner, tmp_path):
        cfg = tmp_path / "broken.toml"
        cfg.write_text("[study\nreps = 3\n")
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "line" in result.output.lower()

    def test_threads_env_fallback(self, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("DSRKIT_THREADS", "2")
        cfg = _write_config(tmp_path, SMOKE_CONFIG.replace("threads = 1\n", ""))
        out = tmp_path / "env_threads"
        result = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "2 thread(s)" in result.output

    def test_manifest_rerun_is_byte_identical(self, runner, tmp_path):
        cfg = _write_config(tmp_path)
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        r1 = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(out1)])
        assert r1.exit_code == 0, r1.output
        manifest = out1 / "run_manifest.json"
        r2 = runner.invoke(main, ["simulate", "--config", str(manifest), "--out", str(out2)])
        assert r2.exit_code == 0, r2.output
        b1 = (out1 / "smoke" / "metrics.csv").read_bytes()
        b2 = (out2 / "smoke" / "metrics.csv").read_bytes()
        assert b1 == b2


class TestFit:
    def _toy_csv(self, tmp_path: Path) -> Path:
        rng = np.random.default_rng(0)
        n = 30
        a = rng.normal(size=n)
        y = 2.0 * a + rng.normal(size=n) * 0.1
        s = rng.uniform(size=(n, 2))
        lines = ["y,a,x,ycoord"]
        for i in range(n):
            lines.append(f"{y[i]},{a[i]},{s[i,0]},{s[i,1]}")
        path = tmp_path / "toy.csv"
        path.write_text("\n".join(lines) + "\n")
        return path, y, a

    def test_ols_matches_hand_computation(self, runner, tmp_path):
        path, y, a = self._toy_csv(tmp_path)
        result = runner.invoke(
            main,
            [
                "fit",
                "--data",
                str(path),
                "--response",
                "y",
                "--treatments",
                "a",
                "--coords",
                "x,ycoord",
                "--method",
                "ols",
            ],
        )
        assert result.exit_code == 0, result.output
        X = np.column_stack([a, np.ones(len(a))])
        beta = np.linalg.lstsq(X, y, rcond=None)[0][0]
        line = [ln for ln in result.output.splitlines() if ln.startswith("a ")][0]
        reported = float(line.split()[1])
        assert reported == pytest.approx(beta, rel=1e-4)
        assert path.with_suffix(".residuals.csv").exists()

    def test_missing_column_exits_2(self, runner, tmp_path):
        path, *_ = self._toy_csv(tmp_path)
        result = runner.invoke(
            main,
            [
                "fit",
                "--data",
                str(path),
                "--response",
                "nosuch",
                "--treatments",
                "a",
                "--coords",
                "x,ycoord",
                "--method",
                "ols",
            ],
        )
        assert result.exit_code == 2
        assert "nosuch" in result.output

    def test_missing_values_reported_with_rows(self, runner, tmp_path):
        path = tmp_path / "gaps.csv"
        path.write_text("y,a,x,yc\n1.0,2.0,0.1,0.2\n,2.0,0.3,0.4\n")
        result = runner.invoke(
            main,
            [
                "fit",
                "--data",
                str(path),
                "--response",
                "y",
                "--treatments",
                "a",
                "--coords",
                "x,yc",
                "--method",
                "ols",
            ],
        )
        assert result.exit_code == 2
        assert "3" in result.output  # file line number of the bad row


class TestReport:
    def _simulated_dir(self, runner, tmp_path, keep_reps=False) -> Path:
        cfg = _write_config(tmp_path)
        out = tmp_path / "res"
        args = ["simulate", "--config", str(cfg), "--out", str(out)]
        if keep_reps:
            args.append("--keep-reps")
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        return out

    def test_markdown_column_order(self, runner, tmp_path):
        out = self._simulated_dir(runner, tmp_path)
        result = runner.invoke(main, ["report", "--in", str(out), "--format", "md"])
        assert result.exit_code == 0, result.output
        assert "| Method | Bias | Rel. Bias | MSE | CI Length | CVG | Power |" in result.output

    def test_csv_round_trip_unchanged(self, runner, tmp_path):
        out = self._simulated_dir(runner, tmp_path)
        original = (out / "smoke" / "metrics.csv").read_text().strip()
        result = runner.invoke(main, ["report", "--in", str(out), "--format", "csv"])
        assert result.exit_code == 0
        assert original in result.output

    def test_plot_without_reps_is_explicit_error(self, runner, tmp_path):
        out = self._simulated_dir(runner, tmp_path, keep_reps=False)
        result = runner.invoke(main, ["report", "--in", str(out), "--plot"])
        assert result.exit_code == 2
        assert "keep-reps" in result.output

    def test_plot_writes_svg(self, runner, tmp_path):
        out = self._simulated_dir(runner, tmp_path, keep_reps=True)
        result = runner.invoke(main, ["report", "--in", str(out), "--plot"])
        assert result.exit_code == 0, result.output
        svg = out / "smoke" / "density.svg"
        assert svg.exists()
        assert svg.read_text().lstrip().startswith("<?xml")

    def test_missing_inputs_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, ["report", "--in", str(tmp_path / "empty")])
        assert result.exit_code == 2
