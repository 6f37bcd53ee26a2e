"""Hyperparameter selection by Gaussian-process marginal likelihood.

For each period t the outcome is modeled as y ~ N(g + c 1, noise * I) with a
GP prior g whose covariance is the period kernel K_t(theta).  The log
marginal likelihood

    L = -1/2 (y - c1)' (K + noise I)^-1 (y - c1)
        - 1/2 log det(K + noise I) - n/2 log(2 pi)

is maximized by multi-start L-BFGS-B with a fixed start list, over
(log theta, log noise, c) for kernel families with a genuine shape
hyperparameter (polynomial scale, gaussian bandwidth) and over
(log noise, c) for the linear kernel, which has none.  The weight penalty is
the sum of the per-period noise optima, lambda = sum_t noise_t, and the
tuned theta_t parameterize the gram matrices of the balance objective.

Linear confounder kernels factor exactly as a two-block low-rank form

    K = U U' + theta * V V',   U = [1, lagged A],  V = [X, lagged A (x) X],

so every likelihood/gradient evaluation reduces to r x r linear algebra
(r = number of columns) via the Woodbury and determinant lemmas; polynomial
and gaussian kernels take a dense Cholesky per evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .kernels import KernelSpec
from .panel import LongitudinalPanel, history_view

__all__ = [
    "PeriodGramBuilder",
    "PeriodTune",
    "TuneResult",
    "TuningError",
    "log_marginal_likelihood",
    "lml_and_gradient",
    "tune",
]

LOG_2PI = math.log(2.0 * math.pi)
NOISE_START_FACTORS = (0.01, 0.1, 1.0, 10.0, 100.0)


class TuningError(RuntimeError):
    """No start produced a finite marginal likelihood."""


def log_marginal_likelihood(K: np.ndarray, y: np.ndarray, c: float, noise: float) -> float:
    """Gaussian log marginal likelihood of y under covariance K + noise * I.

    Raises a LinAlgError naming the offending noise if K + noise * I is not
    positive definite.
    """
    if noise <= 0:
        raise ValueError("noise must be > 0")
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    S = K + noise * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as err:
        raise scipy.linalg.LinAlgError(
            f"K + noise*I not positive definite (noise={noise:.3e}): {err}"
        ) from None
    r = y - c
    alpha = scipy.linalg.cho_solve(factor, r, check_finite=False)
    logdet = 2.0 * float(np.log(np.diag(factor[0])).sum())
    return float(-0.5 * r @ alpha - 0.5 * logdet - 0.5 * n * LOG_2PI)


class _TwoBlockLowRank:
    """Exact LML and gradients for S = UU' + theta VV' + noise I.

    All per-evaluation work is on the r x r capacitance matrix
    noise I + D^{1/2} W'W D^{1/2} with W = [U, V] and D the per-column
    scales, via the Woodbury identity and the matrix determinant lemma.
    """

    def __init__(self, U: np.ndarray, V: np.ndarray, y: np.ndarray):
        W = np.concatenate([U, V], axis=1)
        self.n = W.shape[0]
        self.ru = U.shape[1]
        self.r = W.shape[1]
        self.G = W.T @ W
        self.wy = W.T @ y
        self.w1 = W.T @ np.ones(self.n)
        self.yy = float(y @ y)
        self.sy = float(y.sum())

    def evaluate(self, theta: float, noise: float, c: float):
        """Return (lml, d/d theta, d/d noise, d/d c)."""
        n, r, ru = self.n, self.r, self.ru
        scales = np.concatenate([np.ones(ru), np.full(r - ru, theta)])
        sq = np.sqrt(scales)
        cap = noise * np.eye(r) + (sq[:, None] * self.G) * sq[None, :]
        factor = scipy.linalg.cho_factor(cap, lower=True, check_finite=False)
        wr = self.wy - c * self.w1
        rr = self.yy - 2.0 * c * self.sy + c * c * n
        u = sq * wr
        v = scipy.linalg.cho_solve(factor, u, check_finite=False)
        quad = (rr - u @ v) / noise
        logdet = (n - r) * math.log(noise) + 2.0 * float(np.log(np.diag(factor[0])).sum())
        lml = -0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI

        # alpha = S^-1 (y - c1); every contraction stays r-dimensional
        w_alpha = (wr - self.G @ (sq * v)) / noise
        cap_inv = scipy.linalg.cho_solve(factor, np.eye(r), check_finite=False)
        B = self.G * sq[None, :]  # W'W D^{1/2}
        M = self.G / noise - (B @ cap_inv @ B.T) / noise  # W' S^-1 W
        tr_vv = float(np.trace(M[ru:, ru:]))
        tr_s = (n - r + noise * float(np.trace(cap_inv))) / noise
        alpha_sq = (rr - u @ v - noise * float(v @ v)) / noise**2
        one_alpha = (self.sy - c * n - float(self.w1 @ (sq * v))) / noise

        d_theta = 0.5 * float(w_alpha[ru:] @ w_alpha[ru:]) - 0.5 * tr_vv
        d_noise = 0.5 * alpha_sq - 0.5 * tr_s
        return lml, d_theta, d_noise, one_alpha


class PeriodGramBuilder:
    """K_t(theta) and its theta-derivative for one period's history bundles.

    theta is the confounder-kernel shape parameter: the inner-product
    coefficient for linear and polynomial kernels, the bandwidth for
    gaussian kernels.
    """

    def __init__(self, treat: np.ndarray, conf: np.ndarray, spec: KernelSpec):
        self.spec = spec
        self.n = conf.shape[0]
        self.treat = treat
        self.conf = conf
        if treat.shape[1] == 0:
            self._treat_factor = np.ones((self.n, self.n))
        else:
            self._treat_factor = 1.0 + treat @ treat.T
        if spec.confounder == "gaussian":
            sq = np.einsum("ij,ij->i", conf, conf)
            self._sqdist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * conf @ conf.T, 0.0)
            self._inner = None
        else:
            inner = conf @ conf.T
            self._inner = (inner + inner.T) / 2.0
            self._sqdist = None
        self._lowrank = None
        self._lowrank_key = None

    @property
    def affine(self) -> bool:
        return self.spec.confounder == "linear"

    def lowrank(self, y: np.ndarray) -> _TwoBlockLowRank:
        key = id(y)
        if self._lowrank is None or self._lowrank_key != key:
            n, m = self.treat.shape
            U = np.concatenate([np.ones((n, 1)), self.treat], axis=1)
            if m:
                cross = np.einsum("is,ij->isj", self.treat, self.conf).reshape(n, -1)
                V = np.concatenate([self.conf, cross], axis=1)
            else:
                V = self.conf
            self._lowrank = _TwoBlockLowRank(U, V, np.asarray(y, dtype=float))
            self._lowrank_key = key
        return self._lowrank

    def build(self, theta: float):
        """Return (K(theta), dK/d theta)."""
        if self.spec.confounder == "linear":
            K = self._treat_factor * (1.0 + theta * self._inner)
            dK = self._treat_factor * self._inner
            return K, dK
        if self.spec.confounder == "poly":
            d = self.spec.degree
            poly = (1.0 + theta * self._inner) ** (d - 1)
            K = self._treat_factor * poly * (1.0 + theta * self._inner)
            dK = self._treat_factor * (d * poly * self._inner)
            return K, dK
        gamma = theta
        K = self._treat_factor * np.exp(-self._sqdist / (2.0 * gamma**2))
        return K, K * (self._sqdist / gamma**3)


def lml_and_gradient(builder: PeriodGramBuilder, y, log_theta, log_noise, c):
    """Marginal likelihood and its gradient in (log theta, log noise, c)."""
    theta, noise = math.exp(log_theta), math.exp(log_noise)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if builder.affine:
        lowrank = builder.lowrank(y)
        if lowrank.r < 0.8 * n:  # otherwise the dense path is cheaper
            lml, d_theta, d_noise, d_c = lowrank.evaluate(theta, noise, c)
            return lml, np.array([theta * d_theta, noise * d_noise, d_c])
    K, dK = builder.build(theta)
    S = K + noise * np.eye(n)
    factor = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    r = y - c
    alpha = scipy.linalg.cho_solve(factor, r, check_finite=False)
    S_inv = scipy.linalg.cho_solve(factor, np.eye(n), check_finite=False)
    logdet = 2.0 * float(np.log(np.diag(factor[0])).sum())
    lml = -0.5 * float(r @ alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI
    grad = np.array([
        theta * (0.5 * float(alpha @ dK @ alpha) - 0.5 * float((S_inv * dK).sum())),
        noise * (0.5 * float(alpha @ alpha) - 0.5 * float(np.trace(S_inv))),
        float(alpha.sum()),
    ])
    return lml, grad


@dataclass(frozen=True)
class PeriodTune:
    """Optimum for one period plus the multi-start trace."""

    t: int
    theta: float
    noise: float
    mean: float
    log_marginal: float
    n_obs: int
    theta_tuned: bool
    starts: tuple  # of (noise_start, achieved_lml)


@dataclass(frozen=True)
class TuneResult:
    periods: tuple
    lam: float

    def cumulative_lam(self, t: int) -> float:
        """Penalty for the horizon-t problem: sum of noises up to t."""
        return float(sum(p.noise for p in self.periods if p.t <= t))

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "periods": [
                {
                    "t": p.t,
                    "theta": p.theta,
                    "theta_tuned": p.theta_tuned,
                    "noise": p.noise,
                    "mean": p.mean,
                    "log_marginal": p.log_marginal,
                    "n_obs": p.n_obs,
                }
                for p in self.periods
            ],
        }


def _tune_period(builder: PeriodGramBuilder, y: np.ndarray, t: int) -> PeriodTune:
    var_y = max(float(np.var(y)), 1e-8)
    mean_y = float(np.mean(y))
    q = max(builder.conf.shape[1], 1)
    # The linear kernel has no shape hyperparameter: with standardized inputs
    # its scale is fixed, so only (noise, mean) move.
    tune_theta = builder.spec.confounder != "linear"
    fixed_log_theta = math.log(builder.spec.theta)

    def expand(params):
        if tune_theta:
            return params
        return np.array([fixed_log_theta, params[0], params[1]])

    def objective(params):
        try:
            value, grad = lml_and_gradient(builder, y, *expand(params))
        except scipy.linalg.LinAlgError:
            return 1e25, np.zeros(len(params))
        if not np.isfinite(value):
            return 1e25, np.zeros(len(params))
        return -value, (-grad if tune_theta else -grad[1:])

    noise_bounds = (math.log(var_y) - 18.0, math.log(var_y) + 7.0)
    theta_bounds = (math.log(1e-6), math.log(1e6))
    bounds = ([theta_bounds] if tune_theta else []) + [noise_bounds, (None, None)]
    best = None
    trace = []
    for factor in NOISE_START_FACTORS:
        start = [math.log(factor * var_y), mean_y]
        if tune_theta:
            start.insert(0, math.log(1.0 / q))
        x0 = np.array(start)
        result = scipy.optimize.minimize(
            objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 250},
        )
        for candidate_x, candidate_f in ((x0, objective(x0)[0]), (result.x, result.fun)):
            if candidate_f < 1e24 and (best is None or candidate_f < best[1]):
                best = (np.array(candidate_x), float(candidate_f))
        trace.append((factor * var_y, float(-result.fun) if result.fun < 1e24 else float("-inf")))
    if best is None:
        raise TuningError(f"no start produced a finite marginal likelihood at t={t}")
    x = expand(best[0])
    return PeriodTune(
        t=t,
        theta=float(math.exp(x[0])),
        noise=float(math.exp(x[1])),
        mean=float(x[2]),
        log_marginal=float(-best[1]),
        n_obs=len(y),
        theta_tuned=tune_theta,
        starts=tuple(trace),
    )


def tune(panel: LongitudinalPanel, spec: KernelSpec) -> TuneResult:
    """Tune per-period hyperparameters; lambda is the total noise.

    Expects a standardized panel.  Each period uses the units whose period-t
    history is defined and whose outcome is observed: the single final
    outcome for every t in final-outcome mode, the period-t outcome in
    repeated-outcome mode.
    """
    lags = spec.resolve_lags(panel.n_periods)
    periods = []
    for t in range(1, panel.n_periods + 1):
        view = history_view(panel, t, lags)
        if panel.repeated_outcomes:
            mask = view.defined & panel.outcome_mask[:, t - 1]
            y = panel.outcome[mask, t - 1]
        else:
            mask = view.defined & panel.outcome_mask
            y = panel.outcome[mask]
        if y.size < 2:
            raise TuningError(f"fewer than 2 usable outcomes at t={t}")
        builder = PeriodGramBuilder(view.treat[mask], view.conf[mask], spec)
        periods.append(_tune_period(builder, y, t))
    return TuneResult(periods=tuple(periods), lam=float(sum(p.noise for p in periods)))
