import math

import numpy as np
import pytest

from kow.baselines import design_matrix, fit_logistic, iptw_weights
from kow.simulate import DgpSpec, draw

from conftest import make_panel


class TestFitLogistic:
    def test_all_labels_equal_flags_separation(self):
        X = np.ones((20, 1))
        model = fit_logistic(X, np.ones(20))
        assert model.separation
        assert np.isfinite(model.coef).all()

    def test_saturated_closed_form(self):
        # empirical P(y=1|x=0)=0.5, P(y=1|x=1)=0.75: coef = log 3, intercept 0
        X = np.column_stack([np.ones(800), np.repeat([0.0, 1.0], 400)])
        y = np.concatenate([
            np.tile([0.0, 1.0], 200),
            np.repeat([0.0, 1.0], [100, 300]),
        ])
        model = fit_logistic(X, y)
        assert model.converged
        assert abs(model.coef[0]) < 1e-6
        assert abs(model.coef[1] - math.log(3.0)) < 1e-6

    def test_gradient_at_optimum(self):
        rng = np.random.default_rng(0)
        X = np.column_stack([np.ones(300), rng.standard_normal((300, 3))])
        truth = np.array([0.2, 1.0, -0.5, 0.0])
        y = (rng.random(300) < 1 / (1 + np.exp(-X @ truth))).astype(float)
        model = fit_logistic(X, y)
        p = 1 / (1 + np.exp(-X @ model.coef))
        assert np.abs(X.T @ (y - p)).max() <= 1e-8

    def test_deviance_monotone(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(200), rng.standard_normal((200, 2))])
        y = (rng.random(200) < 0.4).astype(float)
        model = fit_logistic(X, y)
        diffs = np.diff(model.deviance_path)
        assert (diffs <= 1e-10).all()

    def test_collinear_design_ridged(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal(100)
        X = np.column_stack([np.ones(100), base, 2 * base])
        y = (rng.random(100) < 0.5).astype(float)
        model = fit_logistic(X, y)
        assert model.ridged
        assert np.isfinite(model.coef).all()

    def test_non_binary_labels_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            fit_logistic(np.ones((3, 1)), np.array([0.0, 0.5, 1.0]))


class TestIptwWeights:
    def test_constant_half_propensity(self):
        # A independent of everything with P=1/2: weights -> 2^T = 4
        rng = np.random.default_rng(3)
        n, T = 4000, 2
        a = (rng.random((n, T)) < 0.5).astype(float)
        x = rng.standard_normal((n, T, 1))
        panel = make_panel(a, x, outcome=rng.standard_normal(n))
        w = iptw_weights(panel).values
        assert abs(np.mean(w) - 4.0) < 0.25
        assert np.percentile(np.abs(w - 4.0), 90) < 1.5

    def test_siptw_cancels_without_confounders(self):
        rng = np.random.default_rng(4)
        n, T = 50, 3
        a = (rng.random((n, T)) < 0.5).astype(float)
        x = np.zeros((n, T, 0))
        panel = make_panel(a, x, outcome=rng.standard_normal(n))
        w = iptw_weights(panel, stabilized=True).values
        assert np.all(w == 1.0)

    def test_hand_propensities_reciprocal(self):
        # choose X so the saturated fit reproduces exact strata frequencies
        a = np.array([[1.0], [1.0], [1.0], [0.0], [1.0]])
        x = np.array([[[0.0]], [[0.0]], [[0.0]], [[0.0]], [[1.0]]])
        panel = make_panel(a, x, outcome=np.zeros(5))
        w = iptw_weights(panel).values
        # stratum x=0: P(A=1) = 3/4 -> w = 4/3 treated, 4 untreated; x=1: separated
        assert np.allclose(w[:3], 4.0 / 3.0, atol=1e-5)
        assert np.allclose(w[3], 4.0, atol=1e-4)

    def test_method_tags(self):
        panel = draw(DgpSpec(scenario="linear-censoring", n=60, seed=9))
        assert iptw_weights(panel).method == "iptcw"
        assert iptw_weights(panel, stabilized=True).method == "siptcw"
        uncens = draw(DgpSpec(scenario="linear", n=60, seed=9))
        assert iptw_weights(uncens).method == "iptw"
        assert iptw_weights(uncens, stabilized=True).method == "siptw"

    def test_censoring_masks_incomplete_cases(self):
        panel = draw(DgpSpec(scenario="linear-censoring", n=120, seed=10))
        ws = iptw_weights(panel)
        complete = panel.censored[:, -1] == 0
        assert np.array_equal(ws.defined_mask(), complete)
        assert np.isfinite(ws.values[complete]).all()

    def test_repeated_mode_cumulative_products(self):
        rng = np.random.default_rng(5)
        n, T = 40, 3
        a = (rng.random((n, T)) < 0.5).astype(float)
        x = rng.standard_normal((n, T, 1))
        y = rng.standard_normal((n, T))
        panel = make_panel(a, x, outcome=y, repeated=True)
        ws = iptw_weights(panel, repeated=True)
        assert ws.per_period and ws.values.shape == (n, T)
        full = iptw_weights(panel, repeated=False)
        np.testing.assert_allclose(ws.values[:, -1], full.values, rtol=1e-12)

    def test_fitted_propensities_converge(self):
        # correct specification recovers the generative propensities
        panel, truth = draw(DgpSpec(scenario="linear", n=10000, seed=11), return_truth=True)
        from kow.baselines import _expit
        from kow.baselines import design_matrix as dm
        errs = []
        for t in range(1, 4):
            X = dm(panel, t, lags=3, feature_map="linear")
            labels = panel.treatment[:, t - 1]
            model = fit_logistic(X, labels)
            p_hat = _expit(X @ model.coef)
            errs.append(np.abs(p_hat - truth.propensities[:, t - 1]).mean())
        assert max(errs) <= 0.02

    def test_siptw_less_variable_than_iptw(self):
        rng_means = []
        for rep in range(10):
            panel = draw(DgpSpec(scenario="linear", n=500, seed=(12, rep)))
            w_i = iptw_weights(panel).values
            w_s = iptw_weights(panel, stabilized=True).values
            rng_means.append(np.var(w_s) < np.var(w_i))
        assert sum(rng_means) >= 9


class TestDesignMatrix:
    def test_linear_columns(self, random_panel):
        X = design_matrix(random_panel, 3, lags=3, feature_map="linear")
        # intercept + 2 treat lags + 6 confounders + 6 interactions
        assert X.shape == (20, 15)
        assert np.all(X[:, 0] == 1.0)

    def test_quadratic_adds_squares_and_crosses(self, random_panel):
        X = design_matrix(random_panel, 2, lags=2, feature_map="quadratic")
        # intercept + 1 lag + 4 conf + 10 quad + (4 + 10) interactions
        assert X.shape == (20, 30)

    def test_numerator_design_is_history_only(self, random_panel):
        X = design_matrix(random_panel, 2, lags=2, confounders=False)
        assert X.shape == (20, 2)
        X1 = design_matrix(random_panel, 1, lags=2, confounders=False)
        assert X1.shape == (20, 1)
