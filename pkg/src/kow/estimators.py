"""Estimator-style API over the weighting and MSM machinery.

These classes follow the scikit-learn convention: hyperparameters in
``__init__`` (so ``get_params`` / ``set_params`` / ``clone`` work), data in
``fit``, learned quantities in trailing-underscore attributes.  The fitted
input is a :class:`~kow.panel.LongitudinalPanel` rather than an (X, y) pair,
so these compose with the ecosystem's tooling but not with transformers that
require rectangular arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .kernels import KernelSpec
from .msm import EstimateConfig, estimate_effect, fit_msm
from .panel import LongitudinalPanel

__all__ = ["KernelOptimalWeights", "InverseProbabilityWeights", "MsmEstimator"]


def _check_panel(panel):
    if not isinstance(panel, LongitudinalPanel):
        raise TypeError(f"expected a LongitudinalPanel, got {type(panel).__name__}")
    return panel


class KernelOptimalWeights(BaseEstimator):
    """Balance-optimal weights from the penalized quadratic program.

    Parameters mirror the run configuration: the confounder kernel family and
    hyperparameters, the history window ``lags``, the penalty ``lam`` (a
    number, or "auto" for marginal-likelihood tuning), optional per-period
    mean-one normalization, and the QP tolerances.  ``censoring=None``
    adapts to whether the panel records dropout.

    After ``fit``: ``weights_`` (vector, or n x T matrix for repeated
    outcomes), ``lambda_``, ``tune_result_``, ``solutions_``,
    ``balance_before_``, ``balance_after_``.
    """

    def __init__(self, confounder_kernel="poly", degree=2, theta=1.0, gamma=1.0,
                 lags=None, lam="auto", mean_one=False, censoring=None,
                 qp_tol=1e-8, qp_max_iter=None):
        self.confounder_kernel = confounder_kernel
        self.degree = degree
        self.theta = theta
        self.gamma = gamma
        self.lags = lags
        self.lam = lam
        self.mean_one = mean_one
        self.censoring = censoring
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter

    def _config(self) -> EstimateConfig:
        kernel = KernelSpec(
            confounder=self.confounder_kernel, degree=self.degree,
            theta=self.theta, gamma=self.gamma, lags=self.lags,
        )
        return EstimateConfig(
            method="kow", kernel=kernel, lam=self.lam, mean_one=self.mean_one,
            censoring=self.censoring, qp_tol=self.qp_tol, qp_max_iter=self.qp_max_iter,
        )

    def fit(self, panel, y=None):
        result = estimate_effect(_check_panel(panel), self._config())
        self.result_ = result
        self.weight_set_ = result.weights
        self.weights_ = result.weights.values
        self.lambda_ = result.lam
        self.tune_result_ = result.tune_result
        self.solutions_ = result.solutions
        self.balance_before_ = result.balance_before
        self.balance_after_ = result.balance_after
        return self

    def transform(self, panel=None):
        """Return the fitted weights (estimator-as-weighter idiom)."""
        return self.weights_


class InverseProbabilityWeights(BaseEstimator):
    """IPTW / sIPTW weights (censoring-augmented when the panel has dropout).

    After ``fit``: ``weights_``, ``weight_set_`` (with the separation and
    clipping diagnostics of the pooled logistic fits).
    """

    def __init__(self, stabilized=False, feature_map="linear", lags=None, censoring=None):
        self.stabilized = stabilized
        self.feature_map = feature_map
        self.lags = lags
        self.censoring = censoring

    def fit(self, panel, y=None):
        from .baselines import iptw_weights

        weight_set = iptw_weights(
            _check_panel(panel),
            stabilized=self.stabilized,
            feature_map=self.feature_map,
            lags=self.lags,
            censoring=self.censoring,
        )
        self.weight_set_ = weight_set
        self.weights_ = weight_set.values
        return self

    def transform(self, panel=None):
        return self.weights_


class MsmEstimator(BaseEstimator):
    """Weighted least-squares MSM with sandwich inference.

    ``fit(panel, weights)`` accepts a WeightSet or plain array; omitting the
    weights gives the unweighted (OLS) fit.  After ``fit``: ``coef_``,
    ``se_``, ``cov_``, ``fit_`` (the full summary object).
    """

    def __init__(self, design="cumulative"):
        self.design = design

    def fit(self, panel, weights=None):
        panel = _check_panel(panel)
        if weights is None:
            if panel.repeated_outcomes:
                weights = np.ones((panel.n, panel.n_periods))
            else:
                weights = np.ones(panel.n)
        result = fit_msm(panel, weights, design=self.design)
        self.fit_ = result
        self.coef_ = result.beta
        self.se_ = result.se
        self.cov_ = result.cov
        return self

    def predict(self, treatments):
        """MSM mean outcome for treatment regimes (rows of a 0/1 matrix)."""
        a = np.asarray(treatments, dtype=float)
        if self.design == "cumulative":
            return self.coef_[0] + self.coef_[1] * a.sum(axis=1)
        return self.coef_[0] + a @ self.coef_[1:]
