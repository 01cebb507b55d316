import math
import warnings

import pytest

from dsrkit.errors import AllFailed, DomainError, RankDeficient
from dsrkit.harness import (
    MethodConfig,
    compute_metrics,
    run_method,
    run_replication,
    run_study,
)
from dsrkit.simgen import make_scenario

warnings.filterwarnings("ignore", message="folds of size")


def tiny_methods():
    # cheap methods for smoke studies
    return [MethodConfig("ols"), MethodConfig("gsem", bootstrap=10, knots=10)]


class TestComputeMetrics:
    def test_hand_arithmetic(self):
        stats = compute_metrics([(0.4, 0.0, 1.0), (0.6, 0.0, 1.0)], beta0=0.5)
        assert stats.bias == pytest.approx(0.0, abs=1e-15)
        assert stats.mse == pytest.approx(0.01)

    def test_full_coverage(self):
        stats = compute_metrics([(0.5, 0.4, 0.6), (0.55, 0.3, 0.7)], beta0=0.5)
        assert stats.coverage == 1.0

    def test_relative_bias(self):
        stats = compute_metrics([(0.75, 0.0, 1.0)], beta0=0.5)
        assert stats.rel_bias == pytest.approx(0.5)

    def test_power_counts_intervals_excluding_zero(self):
        stats = compute_metrics([(0.5, 0.1, 0.9), (0.5, -0.1, 0.9)], beta0=0.5)
        assert stats.power == 0.5

    def test_empty_rejected(self):
        with pytest.raises(AllFailed):
            compute_metrics([], beta0=0.5)


class TestRunReplication:
    def test_deterministic(self):
        cfg = make_scenario("main", n=40, seed=0)
        r1 = run_replication(cfg, tiny_methods(), rep_index=3, base_seed=99)
        r2 = run_replication(cfg, tiny_methods(), rep_index=3, base_seed=99)
        assert r1.outcomes.keys() == r2.outcomes.keys()
        for key in r1.outcomes:
            assert r1.outcomes[key] == r2.outcomes[key]

    def test_failure_recorded_without_aborting(self, monkeypatch):
        import dsrkit.harness as hn

        real = hn.run_method

        def flaky(dataset, mc, rng, level=0.95):
            if mc.name == "gsem":
                raise RankDeficient("forced failure")
            return real(dataset, mc, rng, level)

        monkeypatch.setattr(hn, "run_method", flaky)
        cfg = make_scenario("main", n=40, seed=0)
        rep = hn.run_replication(cfg, tiny_methods(), rep_index=0, base_seed=1)
        assert rep.outcomes["ols"].ok
        assert not rep.outcomes["gsem"].ok
        assert rep.outcomes["gsem"].error == "RankDeficient"

    def test_scalar_estimates(self):
        cfg = make_scenario("main", n=40, seed=0)
        rep = run_replication(cfg, [MethodConfig("ols")], rep_index=1, base_seed=5)
        assert math.isfinite(rep.outcomes["ols"].beta)


class TestRunStudy:
    def test_thread_count_invariance(self):
        cfg = make_scenario("main", n=40, seed=0)
        t1 = run_study(cfg, tiny_methods(), reps=6, base_seed=7, threads=1)
        t4 = run_study(cfg, tiny_methods(), reps=6, base_seed=7, threads=4)
        assert t1.rows == t4.rows

    def test_single_rep_coverage_binary(self):
        cfg = make_scenario("main", n=40, seed=0)
        table = run_study(cfg, [MethodConfig("ols")], reps=1, base_seed=3)
        assert table.rows[0].coverage in (0.0, 1.0)

    def test_mse_at_least_bias_squared(self):
        cfg = make_scenario("main", n=40, seed=0)
        table = run_study(cfg, tiny_methods(), reps=8, base_seed=11)
        for row in table.rows:
            assert row.mse >= row.bias**2 - 1e-12

    def test_method_failing_every_rep_flagged(self, monkeypatch):
        import dsrkit.harness as hn

        real = hn.run_method

        def flaky(dataset, mc, rng, level=0.95):
            if mc.name == "gsem":
                raise RankDeficient("forced failure")
            return real(dataset, mc, rng, level)

        monkeypatch.setattr(hn, "run_method", flaky)
        cfg = make_scenario("main", n=40, seed=0)
        table = hn.run_study(cfg, tiny_methods(), reps=3, base_seed=2)
        row = {r.method: r for r in table.rows}["gsem"]
        assert row.n_ok == 0 and row.n_fail == 3
        assert math.isnan(row.bias)

    def test_keep_reps(self):
        cfg = make_scenario("main", n=40, seed=0)
        table = run_study(cfg, [MethodConfig("ols")], reps=4, base_seed=1, keep_reps=True)
        assert table.per_rep is not None and len(table.per_rep) == 4

    def test_duplicate_labels_rejected(self):
        cfg = make_scenario("main", n=40, seed=0)
        with pytest.raises(DomainError):
            run_study(cfg, [MethodConfig("ols"), MethodConfig("ols")], reps=2, base_seed=0)

    def test_unconfounded_anchor_coverage_and_bias(self):
        # Sanity anchor at rho=0, sigma2_A=1: estimates are unbiased, and the
        # estimator whose variance model is correctly specified (the mixed
        # model) reaches nominal coverage through the full harness path.
        # Plain OLS cannot anchor coverage here: even without confounding the
        # response keeps a spatial field, and its interaction with the
        # treatment's spatial part inflates Var(beta_hat) beyond what the
        # classical (or HC) standard error measures, increasingly so with n.
        cfg = make_scenario("main", n=150, rho=0.0, sigma2_A=1.0, seed=0)
        methods = [MethodConfig("lmm", tau_mode=4.5, budget=150), MethodConfig("ols")]
        table = run_study(cfg, methods, reps=400, base_seed=42, threads=2)
        rows = {r.method: r for r in table.rows}
        assert 0.90 <= rows["lmm"].coverage <= 0.99
        assert abs(rows["ols"].bias) <= 0.02
        assert abs(rows["lmm"].bias) <= 0.02


class TestMethodConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(DomainError):
            MethodConfig("magic")

    def test_display_label(self):
        assert MethodConfig("dsr", label="dsr45").display == "dsr45"
        assert MethodConfig("dsr").display == "dsr"

    def test_run_method_dispatch_smoke(self):
        from dsrkit.numerics import rng_stream
        from dsrkit.simgen import gen_scenario

        cfg = make_scenario("main", n=40, seed=1)
        ds, _ = gen_scenario(cfg)
        res = run_method(ds, MethodConfig("ols"), rng_stream(0, 0))
        assert res.method.startswith("ols")
