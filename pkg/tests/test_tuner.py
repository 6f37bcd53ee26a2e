import math

import numpy as np
import pytest

from kow.kernels import KernelSpec
from kow.panel import standardize
from kow.tuner import (
    PeriodGramBuilder,
    TuningError,
    lml_and_gradient,
    log_marginal_likelihood,
    tune,
)

from conftest import make_panel


def dense_oracle(K, y, c, noise):
    """Naive evaluation with explicit inverse and determinant."""
    n = len(y)
    S = K + noise * np.eye(n)
    r = y - c
    return float(
        -0.5 * r @ np.linalg.inv(S) @ r
        - 0.5 * math.log(np.linalg.det(S))
        - 0.5 * n * math.log(2 * math.pi)
    )


def random_builder(rng, n=12, m=2, q=3, family="poly", **kwargs):
    treat = (rng.random((n, m)) < 0.5).astype(float) if m else np.zeros((n, 0))
    conf = rng.standard_normal((n, q))
    return PeriodGramBuilder(treat, conf, KernelSpec(confounder=family, **kwargs))


class TestLogMarginalLikelihood:
    def test_zero_kernel_reduces_to_iid_gaussian(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(30) * 1.7 + 0.4
        noise = 2.3
        value = log_marginal_likelihood(np.zeros((30, 30)), y, float(y.mean()), noise)
        r = y - y.mean()
        expected = -0.5 * (r @ r) / noise - 15 * math.log(noise) - 15 * math.log(2 * math.pi)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_two_point_identity_kernel(self):
        value = log_marginal_likelihood(np.eye(2), np.zeros(2), 0.0, 1.0)
        assert value == pytest.approx(-math.log(2) - math.log(2 * math.pi), rel=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            b = random_builder(rng, n=5)
            K, _ = b.build(0.8)
            y = rng.standard_normal(5)
            mine = log_marginal_likelihood(K, y, 0.3, 0.9)
            assert mine == pytest.approx(dense_oracle(K, y, 0.3, 0.9), abs=1e-9)

    def test_nonpositive_noise_rejected(self):
        with pytest.raises(ValueError, match="noise"):
            log_marginal_likelihood(np.eye(2), np.zeros(2), 0.0, 0.0)

    def test_factorization_failure_names_noise(self):
        import scipy.linalg

        K = -10.0 * np.eye(3)  # deliberately broken input
        with pytest.raises(scipy.linalg.LinAlgError, match="noise=1"):
            log_marginal_likelihood(K, np.zeros(3), 0.0, 1.0)


class TestGradients:
    @pytest.mark.parametrize("family,kwargs", [
        ("linear", {}),
        ("poly", {"degree": 2}),
        ("gaussian", {"gamma": 1.0}),
    ])
    def test_analytic_matches_central_differences(self, family, kwargs):
        rng = np.random.default_rng(2)
        for _ in range(8):
            b = random_builder(rng, n=10, m=int(rng.integers(0, 3)), family=family, **kwargs)
            y = rng.standard_normal(10) * 1.5
            params = np.array([rng.uniform(-1, 1), rng.uniform(-0.5, 1.0), rng.uniform(-1, 1)])
            _, grad = lml_and_gradient(b, y, *params)
            h = 1e-5
            for k in range(3):
                plus, minus = params.copy(), params.copy()
                plus[k] += h
                minus[k] -= h
                fp, _ = lml_and_gradient(b, y, *plus)
                fm, _ = lml_and_gradient(b, y, *minus)
                fd = (fp - fm) / (2 * h)
                assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_lowrank_matches_dense_value(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            b = random_builder(rng, n=25, m=2, family="linear")
            y = rng.standard_normal(25)
            theta, noise, c = 0.7, 1.3, 0.2
            fast, _ = lml_and_gradient(b, y, math.log(theta), math.log(noise), c)
            K, _ = b.build(theta)
            assert fast == pytest.approx(log_marginal_likelihood(K, y, c, noise), abs=1e-9)


class TestTune:
    def test_pure_noise_outcomes(self):
        # y independent of everything: theta drifts small, noise ~ Var(y)
        rng = np.random.default_rng(4)
        n = 150
        panel = make_panel(
            (rng.random((n, 2)) < 0.5).astype(float),
            rng.standard_normal((n, 2, 2)),
            outcome=rng.standard_normal(n) * 2.0,
        )
        spanel, _ = standardize(panel)
        result = tune(spanel, KernelSpec(confounder="poly", degree=2))
        var_y = float(np.var(panel.outcome))
        for p in result.periods:
            assert var_y / 2 <= p.noise <= var_y * 2
        assert result.periods[-1].theta < 0.05

    def test_gp_self_consistency_noise_recovery(self):
        # y drawn exactly from the GP: recovered log-noise within +/-0.7 of
        # truth in at least 80% of 50 seeds
        spec = KernelSpec(confounder="linear")
        noise_true = 1.0
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            n = 200
            treat = (rng.random((n, 2)) < 0.5).astype(float)
            conf = rng.standard_normal((n, 2))
            builder = PeriodGramBuilder(treat, conf, spec)
            K, _ = builder.build(1.0)
            ev, evec = np.linalg.eigh(K)
            g = evec @ (np.sqrt(np.maximum(ev, 0)) * rng.standard_normal(n))
            y = g + math.sqrt(noise_true) * rng.standard_normal(n)
            from kow.tuner import _tune_period

            fit = _tune_period(PeriodGramBuilder(treat, conf, spec), y, t=2)
            if abs(math.log(fit.noise) - math.log(noise_true)) <= 0.7:
                hits += 1
        assert hits >= 40

    def test_single_period_lambda_is_noise(self, toy_panel):
        rng = np.random.default_rng(5)
        panel = make_panel(
            (rng.random((40, 1)) < 0.5).astype(float),
            rng.standard_normal((40, 1, 2)),
            outcome=rng.standard_normal(40),
        )
        spanel, _ = standardize(panel)
        result = tune(spanel, KernelSpec(confounder="linear"))
        assert result.lam == result.periods[0].noise

    def test_optimum_beats_every_start(self, random_panel):
        spanel, _ = standardize(random_panel)
        result = tune(spanel, KernelSpec(confounder="poly", degree=2))
        for p in result.periods:
            finite = [lml for _, lml in p.starts if np.isfinite(lml)]
            assert p.log_marginal >= max(finite) - 1e-9

    def test_deterministic(self, random_panel):
        spanel, _ = standardize(random_panel)
        a = tune(spanel, KernelSpec(confounder="linear"))
        b = tune(spanel, KernelSpec(confounder="linear"))
        assert a == b

    def test_cumulative_lambda(self, random_panel):
        spanel, _ = standardize(random_panel)
        result = tune(spanel, KernelSpec(confounder="linear"))
        assert result.cumulative_lam(2) == pytest.approx(
            result.periods[0].noise + result.periods[1].noise
        )
        assert result.cumulative_lam(3) == pytest.approx(result.lam)

    def test_repeated_outcomes_use_period_outcome(self):
        rng = np.random.default_rng(6)
        n, T = 60, 2
        a = (rng.random((n, T)) < 0.5).astype(float)
        x = rng.standard_normal((n, T, 2))
        y = np.column_stack([x[:, 0, 0] * 2, rng.standard_normal(n) * 3])
        panel = make_panel(a, x, outcome=y, repeated=True)
        spanel, _ = standardize(panel)
        result = tune(spanel, KernelSpec(confounder="linear"))
        # period 1 outcome is explained by X_1; period 2 outcome is pure noise
        assert result.periods[0].noise < result.periods[1].noise

    def test_too_few_outcomes(self):
        panel = make_panel(
            np.zeros((3, 1)), np.zeros((3, 1, 1)),
            outcome=np.array([1.0, np.nan, np.nan]),
        )
        with pytest.raises(TuningError, match="fewer than 2"):
            tune(panel, KernelSpec(confounder="linear"))

    def test_linear_theta_not_tuned(self, random_panel):
        spanel, _ = standardize(random_panel)
        result = tune(spanel, KernelSpec(confounder="linear", theta=1.0))
        assert all(p.theta == 1.0 and not p.theta_tuned for p in result.periods)
        poly = tune(spanel, KernelSpec(confounder="poly", degree=2))
        assert all(p.theta_tuned for p in poly.periods)
