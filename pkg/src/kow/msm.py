"""Marginal structural model fitting by weighted least squares.

The MSM regresses the outcome on the treatment regime alone: either a common
cumulative-effect design  g = b1 + b2 * sum_t a_t  or one coefficient per
period.  Inference uses HC0 sandwich standard errors, clustered by unit when
there are repeated outcome observations, and Wald 95% intervals b +/- 1.96 se.

estimate_effect() is the end-to-end driver: standardize -> gram -> tune (or
lambda override) -> assemble -> solve -> weighted fit, with balance
diagnostics before and after weighting.  Failures carry the stage name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .balance import ImbalanceReport, assemble_problem, build_indicators, imbalance_report
from .baselines import WeightSet, iptw_weights
from .kernels import KernelSpec, gram
from .panel import LongitudinalPanel, standardize
from .qp import solve_qp
from .tuner import TuneResult, tune

__all__ = ["MsmFit", "EstimateConfig", "EstimateResult", "StageError", "fit_msm", "estimate_effect"]

DESIGNS = ("cumulative", "per-period")
METHODS = ("kow", "iptw", "siptw", "ols")


class StageError(RuntimeError):
    """Pipeline failure labeled with the stage that produced it."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"[{stage}] {original}")
        self.stage = stage
        self.original = original


@dataclass(frozen=True)
class MsmFit:
    """Coefficients, sandwich covariance, and Wald inference."""

    beta: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    ess: float
    design: str
    n_obs: int
    n_units: int
    term_names: tuple

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "n_obs": self.n_obs,
            "n_units": self.n_units,
            "ess": self.ess,
            "terms": [
                {
                    "name": name,
                    "coef": float(self.beta[j]),
                    "se": float(self.se[j]),
                    "z": float(self.z[j]),
                    "p": float(self.p[j]),
                    "ci_lower": float(self.ci_lower[j]),
                    "ci_upper": float(self.ci_upper[j]),
                }
                for j, name in enumerate(self.term_names)
            ],
        }

    def table(self) -> str:
        lines = [f"{'term':<12}{'coef':>12}{'se':>12}{'z':>10}{'p':>10}{'95% CI':>26}"]
        for j, name in enumerate(self.term_names):
            ci = f"[{self.ci_lower[j]:.4f}, {self.ci_upper[j]:.4f}]"
            lines.append(
                f"{name:<12}{self.beta[j]:>12.4f}{self.se[j]:>12.4f}"
                f"{self.z[j]:>10.3f}{self.p[j]:>10.4f}{ci:>26}"
            )
        return "\n".join(lines)


def _design_rows(panel: LongitudinalPanel, weights: WeightSet, design: str):
    """Row-level (X, y, w, cluster ids) for the weighted regression."""
    a = np.nan_to_num(panel.treatment, nan=0.0)
    T = panel.n_periods
    wmask = weights.defined_mask()
    if panel.repeated_outcomes:
        if weights.per_period:
            wvals = weights.values
        else:  # one weight per unit reused at every horizon
            wvals = np.repeat(np.asarray(weights.values)[:, None], T, axis=1)
            wmask = np.repeat(np.asarray(wmask)[:, None], T, axis=1)
        rows_i, rows_t = np.nonzero(panel.outcome_mask & wmask)
        y = panel.outcome[rows_i, rows_t]
        w = wvals[rows_i, rows_t]
        cumulative = np.cumsum(a, axis=1)
        if design == "cumulative":
            X = np.column_stack([np.ones(rows_i.size), cumulative[rows_i, rows_t]])
            names = ("intercept", "cumulative")
        else:
            X = np.ones((rows_i.size, 1 + T))
            for s in range(T):
                X[:, 1 + s] = np.where(rows_t >= s, a[rows_i, s], 0.0)
            names = ("intercept", *[f"a{s + 1}" for s in range(T)])
        return X, y, w, rows_i, names
    if weights.per_period:
        raise ValueError("per-period weights require a repeated-outcome panel")
    keep = panel.outcome_mask & wmask
    idx = np.flatnonzero(keep)
    y = panel.outcome[idx]
    w = np.asarray(weights.values)[idx]
    if design == "cumulative":
        X = np.column_stack([np.ones(idx.size), a[idx].sum(axis=1)])
        names = ("intercept", "cumulative")
    else:
        X = np.column_stack([np.ones(idx.size), a[idx]])
        names = ("intercept", *[f"a{s + 1}" for s in range(T)])
    return X, y, w, idx, names


def fit_msm(panel: LongitudinalPanel, weights, design: str = "cumulative") -> MsmFit:
    """Weighted least squares fit of the MSM with HC0 sandwich covariance.

    weights may be a WeightSet or a plain array (treated as final-outcome
    unit weights).  With repeated outcomes the sandwich is clustered by unit.
    """
    if design not in DESIGNS:
        raise ValueError(f"unknown design: {design!r}")
    if not isinstance(weights, WeightSet):
        values = np.asarray(weights, dtype=float)
        weights = WeightSet(values=values, method="external", per_period=values.ndim == 2)
    X, y, w, cluster, names = _design_rows(panel, weights, design)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    if X.shape[0] < X.shape[1]:
        raise ValueError("fewer observations than coefficients")
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    if np.linalg.matrix_rank(Xw) < X.shape[1]:
        raise ValueError("design matrix is rank deficient after weighting")
    beta = np.linalg.lstsq(Xw, yw, rcond=None)[0]
    resid = y - X @ beta
    bread = np.linalg.inv(X.T @ (w[:, None] * X))
    scores = X * (w * resid)[:, None]
    if panel.repeated_outcomes:
        k = X.shape[1]
        meat = np.zeros((k, k))
        for unit in np.unique(cluster):
            s = scores[cluster == unit].sum(axis=0)
            meat += np.outer(s, s)
        n_units = int(np.unique(cluster).size)
    else:
        meat = scores.T @ scores
        n_units = X.shape[0]
    cov = bread @ meat @ bread
    cov = (cov + cov.T) / 2.0
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.sign(beta) * np.inf))
    p = np.array([math.erfc(abs(v) / math.sqrt(2.0)) if np.isfinite(v) else 0.0 for v in z])
    return MsmFit(
        beta=beta,
        cov=cov,
        se=se,
        z=z,
        p=p,
        ci_lower=beta - 1.96 * se,
        ci_upper=beta + 1.96 * se,
        ess=float(w.sum() / w.max()) if w.size else 0.0,
        design=design,
        n_obs=X.shape[0],
        n_units=n_units,
        term_names=names,
    )


@dataclass(frozen=True)
class EstimateConfig:
    """Resolved configuration for one end-to-end estimate."""

    method: str = "kow"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    lam: float | str = "auto"
    feature_map: str = "linear"
    design: str = "cumulative"
    censoring: bool | None = None
    mean_one: bool = False
    qp_tol: float = 1e-8
    qp_max_iter: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method: {self.method!r}")
        if isinstance(self.lam, str) and self.lam != "auto":
            raise ValueError("lam must be a number or 'auto'")
        if not isinstance(self.lam, str) and self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass(frozen=True)
class EstimateResult:
    fit: MsmFit
    weights: WeightSet
    balance_before: ImbalanceReport
    balance_after: ImbalanceReport
    lam: float | None
    config: EstimateConfig
    tune_result: TuneResult | None = None
    solutions: tuple = ()


def _tuned_spec(kernel: KernelSpec, period_tune) -> KernelSpec:
    if kernel.confounder == "gaussian":
        return replace(kernel, gamma=period_tune.theta)
    return replace(kernel, theta=period_tune.theta)


def _build_grams(spanel, kernel: KernelSpec, tuned):
    """Per-period grams, with tuned per-period hyperparameters when present."""
    specs = [
        kernel if tuned is None else _tuned_spec(kernel, tuned.periods[t - 1])
        for t in range(1, spanel.n_periods + 1)
    ]
    return [gram(spanel, spec_t, t) for t, spec_t in enumerate(specs, start=1)]


def _kow_weights(panel, config, grams, indicators, censored, tuned) -> tuple:
    lam_total = tuned.lam if tuned is not None else float(config.lam)
    mode = "censored" if censored else "uncensored"
    solutions = []
    if panel.repeated_outcomes:
        T = panel.n_periods
        values = np.empty((panel.n, T))
        for horizon in range(1, T + 1):
            lam_h = tuned.cumulative_lam(horizon) if tuned is not None else float(config.lam)
            normalization = [panel.uncensored(horizon)] if config.mean_one else None
            problem = assemble_problem(
                grams[:horizon], indicators[:horizon], lam_h, mode=mode,
                normalization=normalization,
            )
            solution = solve_qp(problem, tol=config.qp_tol, max_iter=config.qp_max_iter)
            solutions.append(solution)
            values[:, horizon - 1] = solution.weights
        weight_set = WeightSet(values=values, method="kow", lam=lam_total,
                               per_period=True, normalized=config.mean_one)
    else:
        normalization = None
        if config.mean_one:
            normalization = [panel.uncensored(panel.n_periods) if censored else np.ones(panel.n, bool)]
        problem = assemble_problem(grams, indicators, lam_total, mode=mode,
                                   normalization=normalization)
        solution = solve_qp(problem, tol=config.qp_tol, max_iter=config.qp_max_iter)
        solutions.append(solution)
        weight_set = WeightSet(values=solution.weights, method="kow", lam=lam_total,
                               normalized=config.mean_one)
    return weight_set, lam_total, tuple(solutions)


def estimate_effect(panel: LongitudinalPanel, config: EstimateConfig | None = None) -> EstimateResult:
    """Run the full pipeline for one method configuration on one panel."""
    config = config or EstimateConfig()
    censored = panel.has_censoring if config.censoring is None else config.censoring

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as err:
            raise StageError(name, err) from err

    spanel, _ = stage("standardize", standardize, panel)
    tuned = None
    if config.method == "kow" and config.lam == "auto":
        tuned = stage("tune", tune, spanel, config.kernel)
    grams = stage("gram", _build_grams, spanel, config.kernel, tuned)
    indicators = build_indicators(panel, censored=censored)

    solutions = ()
    lam_resolved = None
    if config.method == "kow":
        weight_set, lam_resolved, solutions = stage(
            "solve", _kow_weights, panel, config, grams, indicators, censored, tuned
        )
    elif config.method in ("iptw", "siptw"):
        weight_set = stage(
            "weights", iptw_weights, panel,
            stabilized=config.method == "siptw",
            feature_map=config.feature_map,
            censoring=censored,
        )
    else:  # ols
        if panel.repeated_outcomes:
            values = np.ones((panel.n, panel.n_periods))
            weight_set = WeightSet(values=values, method="ols", per_period=True)
        else:
            weight_set = WeightSet(values=np.ones(panel.n), method="ols")

    fit = stage("fit", fit_msm, panel, weight_set, config.design)

    def report_weights():
        values = weight_set.values[:, -1] if weight_set.per_period else weight_set.values
        mask = weight_set.defined_mask()
        mask = mask[:, -1] if weight_set.per_period else mask
        return np.where(mask, values, 0.0)

    balance_before = stage("diagnose", imbalance_report, np.ones(panel.n), grams, indicators)
    balance_after = stage("diagnose", imbalance_report, report_weights(), grams, indicators)
    return EstimateResult(
        fit=fit,
        weights=weight_set,
        balance_before=balance_before,
        balance_after=balance_after,
        lam=lam_resolved,
        config=config,
        tune_result=tuned,
        solutions=solutions,
    )
