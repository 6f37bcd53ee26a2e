"""Inverse-probability-of-treatment weights via pooled logistic regression.

Per period t a logistic model for A_t given the lagged treatment and
confounder history is fit by iteratively reweighted least squares; weights
are the product over periods of h_t / P(A_t = a_t | history), with h_t = 1
(IPTW) or the treatment-history-only model h_t = P(A_t = a_t | lagged A)
(sIPTW).  With censoring, analogous factors for remaining uncensored
multiply in (IPTCW / sIPTCW).

Feature maps follow the two simulation specifications: "linear" uses lagged
treatments, the confounder history window, and interactions of the previous
treatment with each confounder column; "quadratic" adds all squares and
pairwise products of the confounder columns and their interactions with the
previous treatment.

Fitted probabilities are clipped at 1e-10 before inversion; separation is
flagged, not fatal, because the resulting extreme weights are part of what
the method comparisons measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .panel import LongitudinalPanel, history_view

__all__ = [
    "LogisticModel",
    "WeightSet",
    "fit_logistic",
    "iptw_weights",
    "design_matrix",
]

PROB_CLIP = 1e-10
FEATURE_MAPS = ("linear", "quadratic")


def _expit(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class LogisticModel:
    """Maximum-likelihood logistic fit with convergence diagnostics."""

    coef: np.ndarray
    converged: bool
    n_iter: int
    separation: bool
    ridged: bool
    deviance_path: tuple

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """P(label = 1 | row), clipped to [1e-10, 1 - 1e-10]."""
        return np.clip(_expit(X @ self.coef), PROB_CLIP, 1.0 - PROB_CLIP)


def _deviance(y, p):
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return -2.0 * float(y @ np.log(p) + (1.0 - y) @ np.log1p(-p))


def fit_logistic(X: np.ndarray, y: np.ndarray, tol: float = 1e-8, max_iter: int = 100) -> LogisticModel:
    """IRLS fit of a logistic regression (intercept column supplied by caller).

    Converges on the infinity norm of the score X'(y - p).  Rank-deficient
    information matrices fall back to a 1e-8 ridge (flagged).  Fitted
    probabilities within 1e-10 of 0 or 1 set the separation flag.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    n, k = X.shape
    beta = np.zeros(k)
    p = _expit(X @ beta)
    dev = _deviance(y, p)
    path = [dev]
    ridged = False
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        grad = X.T @ (y - p)
        if np.abs(grad).max() <= tol:
            converged = True
            n_iter -= 1
            break
        s = np.clip(p * (1.0 - p), PROB_CLIP, None)
        info = (X * s[:, None]).T @ X
        try:
            factor = scipy.linalg.cho_factor(info, lower=True, check_finite=False)
            direction = scipy.linalg.cho_solve(factor, grad, check_finite=False)
        except scipy.linalg.LinAlgError:
            ridged = True
            ridge = 1e-8 * max(np.trace(info) / k, 1.0)
            direction = np.linalg.solve(info + ridge * np.eye(k), grad)
        step = 1.0
        for _ in range(30):
            candidate = beta + step * direction
            p_new = _expit(X @ candidate)
            dev_new = _deviance(y, p_new)
            if dev_new <= dev + 1e-10:
                break
            step /= 2.0
        beta, p, dev = candidate, p_new, dev_new
        path.append(dev)
    # perfect classification means the MLE is at infinity even if the iterate
    # stopped just inside the clip window
    separation = bool(
        (p < PROB_CLIP).any()
        or (p > 1.0 - PROB_CLIP).any()
        or np.abs(y - p).max() < 1e-6
    )
    return LogisticModel(
        coef=beta,
        converged=converged,
        n_iter=n_iter,
        separation=separation,
        ridged=ridged,
        deviance_path=tuple(path),
    )


@dataclass(frozen=True)
class WeightSet:
    """Weights per unit (final-outcome) or per unit-period (repeated).

    mask marks where a weight is defined: inverse-probability weights only
    exist for trajectories observed through the relevant horizon.  lam is
    set for balance-optimized weights only.
    """

    values: np.ndarray
    method: str
    lam: float | None = None
    per_period: bool = False
    mask: np.ndarray | None = None
    normalized: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        defined = self.values[self.defined_mask()]
        if not np.isfinite(defined).all():
            raise ValueError("weights must be finite where defined")
        if (defined < 0).any():
            raise ValueError("weights must be nonnegative")

    def defined_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.mask


def design_matrix(
    panel: LongitudinalPanel,
    t: int,
    lags: int,
    feature_map: str = "linear",
    confounders: bool = True,
) -> np.ndarray:
    """Pooled-logistic design for period t (intercept first).

    confounders=False gives the treatment-history-only design used for
    stabilized numerators (intercept-only at t = 1).
    """
    if feature_map not in FEATURE_MAPS:
        raise ValueError(f"unknown feature map: {feature_map!r}")
    view = history_view(panel, t, lags)
    cols = [np.ones(panel.n)]
    cols.extend(view.treat.T)
    if confounders:
        conf = view.conf
        cols.extend(conf.T)
        extra = []
        if feature_map == "quadratic":
            q = conf.shape[1]
            for j in range(q):
                for m in range(j, q):
                    extra.append(conf[:, j] * conf[:, m])
        prev = view.treat[:, -1] if view.treat.shape[1] else None
        if prev is not None:
            for col in list(conf.T) + extra:
                cols.append(prev * col)
        cols.extend(extra)
    return np.column_stack(cols)


def _probability_of_observed(model, X, labels):
    p1 = model.predict_proba(X)
    return np.where(labels == 1.0, p1, 1.0 - p1)


def iptw_weights(
    panel: LongitudinalPanel,
    stabilized: bool = False,
    feature_map: str = "linear",
    lags: int | None = None,
    censoring: bool | None = None,
    repeated: bool | None = None,
) -> WeightSet:
    """Inverse probability of treatment (and censoring) weights.

    Final-outcome mode multiplies factors over t = 1..T per unit; repeated
    mode keeps every cumulative product, one weight per unit-period.  Any
    denominator below 1e-12 raises, naming the unit-period (clipping makes
    this unreachable for fitted models, so it signals a corrupted model).
    """
    censoring = panel.has_censoring if censoring is None else censoring
    repeated = panel.repeated_outcomes if repeated is None else repeated
    lags = panel.n_periods if lags is None else lags
    n, T = panel.n, panel.n_periods
    factors = np.ones((n, T))
    defined = np.ones((n, T), dtype=bool)
    models = []
    clipped = 0
    for t in range(1, T + 1):
        X_den = design_matrix(panel, t, lags, feature_map)
        rows = panel.uncensored(t)
        labels = np.nan_to_num(panel.treatment[:, t - 1], nan=0.0)
        den_model = fit_logistic(X_den[rows], labels[rows])
        p_den = _probability_of_observed(den_model, X_den, labels)
        if np.any(p_den[rows] < 1e-12):
            bad = int(np.flatnonzero(rows & (p_den < 1e-12))[0])
            raise ValueError(f"denominator below 1e-12 at unit index {bad}, period {t}")
        raw = _expit(X_den @ den_model.coef)
        clipped += int(((raw < PROB_CLIP) | (raw > 1.0 - PROB_CLIP))[rows].sum())
        factor = 1.0 / p_den
        models.append(("treatment", t, den_model))
        if stabilized:
            X_num = design_matrix(panel, t, lags, feature_map, confounders=False)
            num_model = fit_logistic(X_num[rows], labels[rows])
            factor = factor * _probability_of_observed(num_model, X_num, labels)
            models.append(("treatment-numerator", t, num_model))
        if censoring:
            at_risk = panel.at_risk(t)
            uncens = (panel.censored[:, t - 1] == 0).astype(float)
            X_cden = design_matrix(panel, t, lags, feature_map)
            cden_model = fit_logistic(X_cden[at_risk], uncens[at_risk])
            c_factor = 1.0 / cden_model.predict_proba(X_cden)
            models.append(("censoring", t, cden_model))
            if stabilized:
                X_cnum = design_matrix(panel, t, lags, feature_map, confounders=False)
                cnum_model = fit_logistic(X_cnum[at_risk], uncens[at_risk])
                c_factor = c_factor * cnum_model.predict_proba(X_cnum)
                models.append(("censoring-numerator", t, cnum_model))
            factor = factor * c_factor
        defined[:, t - 1] = rows
        factors[:, t - 1] = factor

    cumulative = np.cumprod(factors, axis=1)
    cumulative_defined = np.cumprod(defined, axis=1).astype(bool)
    tag = ("siptcw" if stabilized else "iptcw") if censoring else ("siptw" if stabilized else "iptw")
    diagnostics = {"clipped": clipped, "separation": any(m.separation for _, _, m in models)}
    if repeated:
        values = np.where(cumulative_defined, cumulative, np.nan)
        return WeightSet(values=values, method=tag, per_period=True,
                         mask=cumulative_defined, diagnostics=diagnostics)
    values = np.where(cumulative_defined[:, -1], cumulative[:, -1], np.nan)
    return WeightSet(values=values, method=tag, per_period=False,
                     mask=cumulative_defined[:, -1], diagnostics=diagnostics)
