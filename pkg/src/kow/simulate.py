"""Synthetic longitudinal studies: data generation, replication, timing.

Two scenarios over T periods with p time-dependent confounders:

* linear:     Y = -1.91 + 0.8 sum_t A_t + 0.5 sum_k Z_k
              + 0.05 sum_{k<m} Z_k Z_m + N(0, 5),   Z_k = sum_t X_{t,k}
* nonlinear:  Y = -21.46 + 0.8 sum_t A_t + 0.5 sum_k Z_k
              + 0.1 sum_{k<m} Z_k Z_m + N(0, 5),    Z_k = sum_t X_{t,k}^2

with X_{t,k} ~ N(X_{t-1,k} + 0.1, 1) from X_{0,k} = 0, A_0 = 0, and treatment
probabilities 1 / (1 + exp(eta)) for the linear/nonlinear score eta printed
in _propensity_score below.  "N(0, 5)" is taken as variance 5 (sd sqrt(5));
this choice rescales every method's error alike.  The intercepts center E[Y]
at 0 under these conventions (pairwise sums over unordered pairs; the k > 3
score coefficients cycle the base triples when p > 3).

The linear-censoring scenario adds a sequentially ignorable dropout hazard on
(A_{t-1}, X_t); everything after dropout is masked in the returned panel.

Replications are seeded through a counter-based Philox generator keyed by
(study seed, n, replication index), so streams are independent and results do
not depend on execution order or worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .balance import assemble_problem, build_indicators
from .kernels import KernelSpec
from .msm import EstimateConfig, estimate_effect, fit_msm
from .panel import LongitudinalPanel, standardize
from .qp import solve_qp
from .tuner import tune

__all__ = [
    "DgpSpec",
    "SimulationTruth",
    "ReplicationStudy",
    "ReplicationSummary",
    "ReplicationResult",
    "TimingRow",
    "TRUE_EFFECT",
    "draw",
    "replicate",
    "timing_study",
    "methods_for",
]

TRUE_EFFECT = 0.8
SCENARIOS = ("linear", "nonlinear", "linear-censoring")
METHOD_TAGS = (
    "kow-k1", "kow-k2",
    "iptw-linear", "iptw-nonlinear",
    "siptw-linear", "siptw-nonlinear",
    "ols",
)

LINEAR_COEFFS = MappingProxyType({
    "intercept": -1.91, "effect": TRUE_EFFECT, "conf_main": 0.5, "conf_inter": 0.05,
    "noise_var": 5.0, "drift": 0.1,
    "prop_base": 0.5, "prop_prev": 0.5, "prop_x": (0.05, 0.08, -0.03),
    "prop_prev_x": 0.2,
})
NONLINEAR_COEFFS = MappingProxyType({
    "intercept": -21.46, "effect": TRUE_EFFECT, "conf_main": 0.5, "conf_inter": 0.1,
    "noise_var": 5.0, "drift": 0.1,
    "prop_base": 0.5, "prop_prev": 0.5, "prop_x": (0.05, 0.08, -0.03),
    "prop_xsq": (0.025, 0.04, -0.015), "prop_cross": 0.3,
    "prop_prev_x": 0.2, "prop_prev_xsq": 0.1, "prop_prev_cross": 0.05,
})
CENSOR_COEFFS = MappingProxyType({"base": -2.3, "prev_treat": 0.45, "x1": 0.2, "x2": -0.1})


@dataclass(frozen=True)
class DgpSpec:
    """One synthetic-study configuration; the seed is mandatory.

    The seed may be an int or a tuple of ints (a substream key).
    """

    scenario: str
    n: int
    seed: int | tuple
    T: int = 3
    p: int = 3

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario: {self.scenario!r}")
        if self.n < 1 or self.T < 1 or self.p < 1:
            raise ValueError("n, T, p must be positive")

    @property
    def coefficients(self):
        return NONLINEAR_COEFFS if self.scenario == "nonlinear" else LINEAR_COEFFS


@dataclass(frozen=True)
class SimulationTruth:
    """Generative quantities kept for oracle checks."""

    propensities: np.ndarray
    censor_hazards: np.ndarray | None


def _rng(seed) -> np.random.Generator:
    entropy = seed if isinstance(seed, tuple) else (seed,)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _cycled(base, p):
    return np.array([base[k % len(base)] for k in range(p)])


def _propensity_score(x, prev_a, coeffs, p, nonlinear):
    eta = coeffs["prop_base"] + coeffs["prop_prev"] * prev_a
    eta = eta + x @ _cycled(coeffs["prop_x"], p)
    eta = eta + coeffs["prop_prev_x"] * prev_a * x.sum(axis=1)
    if nonlinear:
        xsq = x**2
        cross = _pairsum(x)
        eta = eta + xsq @ _cycled(coeffs["prop_xsq"], p)
        eta = eta + coeffs["prop_cross"] * cross
        eta = eta + coeffs["prop_prev_xsq"] * prev_a * xsq.sum(axis=1)
        eta = eta + coeffs["prop_prev_cross"] * prev_a * cross
    return eta


def _pairsum(z):
    """sum_{k<m} z_k z_m per row."""
    total = z.sum(axis=1)
    return 0.5 * (total**2 - (z**2).sum(axis=1))


def draw(spec: DgpSpec, return_truth: bool = False):
    """Draw one panel (final-outcome mode) from the scenario's model."""
    rng = _rng(spec.seed)
    n, T, p = spec.n, spec.T, spec.p
    coeffs = spec.coefficients
    nonlinear = spec.scenario == "nonlinear"
    censoring = spec.scenario == "linear-censoring"

    x = np.zeros((n, T, p))
    a = np.zeros((n, T))
    pi = np.zeros((n, T))
    hazards = np.zeros((n, T)) if censoring else None
    censored = np.zeros((n, T), dtype=np.int8)
    prev_x = np.zeros((n, p))
    prev_a = np.zeros(n)
    prev_c = np.zeros(n, dtype=np.int8)
    for t in range(T):
        x[:, t] = prev_x + coeffs["drift"] + rng.standard_normal((n, p))
        eta = _propensity_score(x[:, t], prev_a, coeffs, p, nonlinear)
        pi[:, t] = 1.0 / (1.0 + np.exp(eta))
        a[:, t] = rng.random(n) < pi[:, t]
        if censoring:
            hz = 1.0 / (1.0 + np.exp(-(
                CENSOR_COEFFS["base"]
                + CENSOR_COEFFS["prev_treat"] * prev_a
                + CENSOR_COEFFS["x1"] * x[:, t, 0]
                + CENSOR_COEFFS["x2"] * x[:, t, min(1, p - 1)]
            )))
            hazards[:, t] = hz
            newly = (rng.random(n) < hz).astype(np.int8)
            censored[:, t] = np.maximum(prev_c, newly)
            prev_c = censored[:, t]
        prev_x = x[:, t]
        prev_a = a[:, t]

    z = (x**2).sum(axis=1) if nonlinear else x.sum(axis=1)
    y = (
        coeffs["intercept"]
        + coeffs["effect"] * a.sum(axis=1)
        + coeffs["conf_main"] * z.sum(axis=1)
        + coeffs["conf_inter"] * _pairsum(z)
        + np.sqrt(coeffs["noise_var"]) * rng.standard_normal(n)
    )

    treatment = a.astype(float)
    confounders = x.copy()
    outcome = y.copy()
    if censoring:
        treatment[censored == 1] = np.nan
        for t in range(1, T):
            confounders[censored[:, t - 1] == 1, t, :] = np.nan
        outcome[censored[:, T - 1] == 1] = np.nan
    mask = ~np.isnan(outcome)
    panel = LongitudinalPanel(
        treatment=treatment,
        confounders=confounders,
        censored=censored,
        outcome=outcome,
        outcome_mask=mask,
        repeated_outcomes=False,
        unit_ids=tuple(range(n)),
        confounder_names=tuple(f"x{j + 1}" for j in range(p)),
    )
    if return_truth:
        return panel, SimulationTruth(propensities=pi, censor_hazards=hazards)
    return panel


def methods_for(scenario: str, specification: str):
    """Expand a specification label into concrete method tags."""
    first = specification in ("correct",) if scenario.startswith("linear") else specification == "misspecified"
    if first:
        return ("kow-k1", "iptw-linear", "siptw-linear", "ols")
    return ("kow-k2", "iptw-nonlinear", "siptw-nonlinear", "ols")


def _method_config(tag: str, lam) -> EstimateConfig:
    if tag == "kow-k1":
        return EstimateConfig(method="kow", kernel=KernelSpec(confounder="linear"), lam=lam)
    if tag == "kow-k2":
        return EstimateConfig(method="kow", kernel=KernelSpec(confounder="poly", degree=2), lam=lam)
    if tag == "ols":
        return EstimateConfig(method="ols")
    method, features = tag.split("-")
    return EstimateConfig(
        method=method,
        feature_map="linear" if features == "linear" else "quadratic",
    )


@dataclass(frozen=True)
class ReplicationStudy:
    """Replication design over a sample-size grid or a penalty grid."""

    scenario: str
    methods: tuple
    reps: int
    seed: int
    n_grid: tuple | None = None
    lambda_grid: tuple | None = None
    n: int = 500
    T: int = 3
    p: int = 3
    jobs: int = 1

    def __post_init__(self):
        if (self.n_grid is None) == (self.lambda_grid is None):
            raise ValueError("exactly one of n_grid and lambda_grid is required")
        for tag in self.methods:
            if tag not in METHOD_TAGS:
                raise ValueError(f"unknown method tag: {tag!r}")
        if self.lambda_grid is not None and any(
            l2 < l1 for l1, l2 in zip(self.lambda_grid, self.lambda_grid[1:])
        ):
            raise ValueError("lambda grid must be ascending")


@dataclass(frozen=True)
class ReplicationSummary:
    """Bias / MSE / variance of one method at one grid point.

    Moments share the same sample so mse = bias^2 + variance identically.
    mc_se_* are Monte Carlo standard errors of the reported metrics.
    """

    method: str
    grid: float
    grid_kind: str  # "n" or "lambda"
    bias: float
    mse: float
    variance: float
    reps: int
    failures: int
    mc_se_bias: float
    mc_se_mse: float


@dataclass(frozen=True)
class ReplicationResult:
    summaries: tuple
    estimates: dict  # (method, grid) -> np.ndarray of per-rep estimates (NaN = failed)
    failures: tuple  # (method, grid, rep, message)


def _replicate_cell(study: ReplicationStudy, n: int, rep: int) -> dict:
    """All methods on one draw; returns method tag -> estimate or error text."""
    seed = (study.seed, n, rep)
    scenario = study.scenario
    panel = draw(DgpSpec(scenario=scenario, n=n, seed=seed, T=study.T, p=study.p))
    out = {}
    if study.lambda_grid is not None:
        kow_tags = [m for m in study.methods if m.startswith("kow")]
        other = [m for m in study.methods if not m.startswith("kow")]
        for tag in kow_tags:
            try:
                out.update(_kow_sweep(panel, tag, study.lambda_grid))
            except Exception as err:  # recorded, never silently dropped
                for lam in study.lambda_grid:
                    out[(tag, lam)] = f"error: {err}"
        for tag in other:
            try:
                value = estimate_effect(panel, _method_config(tag, None)).fit.beta[1]
                for lam in study.lambda_grid:
                    out[(tag, lam)] = float(value)
            except Exception as err:
                for lam in study.lambda_grid:
                    out[(tag, lam)] = f"error: {err}"
        return out
    for tag in study.methods:
        try:
            result = estimate_effect(panel, _method_config(tag, "auto"))
            out[(tag, n)] = float(result.fit.beta[1])
        except Exception as err:
            out[(tag, n)] = f"error: {err}"
    return out


def _kow_sweep(panel, tag, lambdas) -> dict:
    """KOW estimates along a lambda grid.

    Kernel hyperparameters are still tuned (only the penalty is overridden);
    the tuned grams are shared across the whole grid.
    """
    from kow.msm import _build_grams  # local import avoids a cycle

    spec = KernelSpec(confounder="linear") if tag == "kow-k1" else KernelSpec(confounder="poly", degree=2)
    spanel, _ = standardize(panel)
    tuned = tune(spanel, spec)
    grams = _build_grams(spanel, spec, tuned)
    censored = panel.has_censoring
    indicators = build_indicators(panel, censored=censored)
    mode = "censored" if censored else "uncensored"
    out = {}
    warm = None
    for lam in sorted(lambdas, reverse=True):  # descend so warm starts track the path
        problem = assemble_problem(grams, indicators, lam, mode=mode)
        solution = solve_qp(problem, warm_start=warm)
        warm = solution.weights
        fit = fit_msm(panel, solution.weights, "cumulative")
        out[(tag, lam)] = float(fit.beta[1])
    return out


def replicate(study: ReplicationStudy) -> ReplicationResult:
    """Run the replication study and aggregate bias / MSE / variance.

    Replications are independent Philox substreams reduced in replication
    order, so the output is identical for any worker count.
    """
    grid = study.n_grid if study.n_grid is not None else [study.n]
    cells = [(n, rep) for n in grid for rep in range(study.reps)]
    if study.jobs > 1:
        with ProcessPoolExecutor(max_workers=study.jobs) as pool:
            raw = list(pool.map(_replicate_worker, [(study, n, rep) for n, rep in cells], chunksize=1))
    else:
        raw = [_replicate_cell(study, n, rep) for n, rep in cells]
    results = dict(zip(cells, raw))

    grid_kind = "n" if study.n_grid is not None else "lambda"
    grid_values = study.n_grid if study.n_grid is not None else study.lambda_grid
    estimates = {}
    failures = []
    summaries = []
    for method in study.methods:
        for value in grid_values:
            draws = np.full(study.reps, np.nan)
            for rep in range(study.reps):
                n_key = value if grid_kind == "n" else study.n
                cell = results[(int(n_key), rep)]
                entry = cell[(method, value)]
                if isinstance(entry, str):
                    failures.append((method, value, rep, entry))
                else:
                    draws[rep] = entry
            ok = draws[~np.isnan(draws)]
            err = ok - TRUE_EFFECT
            bias = float(err.mean()) if ok.size else float("nan")
            mse = float((err**2).mean()) if ok.size else float("nan")
            variance = mse - bias**2 if ok.size else float("nan")
            summaries.append(
                ReplicationSummary(
                    method=method,
                    grid=float(value),
                    grid_kind=grid_kind,
                    bias=bias,
                    mse=mse,
                    variance=variance,
                    reps=int(ok.size),
                    failures=study.reps - int(ok.size),
                    mc_se_bias=float(err.std(ddof=1) / np.sqrt(ok.size)) if ok.size > 1 else float("nan"),
                    mc_se_mse=float((err**2).std(ddof=1) / np.sqrt(ok.size)) if ok.size > 1 else float("nan"),
                )
            )
            estimates[(method, float(value))] = draws
    return ReplicationResult(summaries=tuple(summaries), estimates=estimates, failures=tuple(failures))


def _replicate_worker(args):
    return _replicate_cell(*args)


@dataclass(frozen=True)
class TimingRow:
    axis: str  # "T" or "p"
    value: int
    stage: str  # "tune" | "assemble" | "solve"
    median_seconds: float
    repetitions: int


def _timed_kow_run(panel):
    """One full KOW weight computation, timed per stage."""
    from kow.msm import _build_grams  # local import avoids a cycle

    t0 = time.perf_counter()
    spanel, _ = standardize(panel)
    spec = KernelSpec(confounder="linear")
    t1 = time.perf_counter()
    tuned = tune(spanel, spec)
    t2 = time.perf_counter()
    grams = _build_grams(spanel, spec, tuned)
    indicators = build_indicators(panel, censored=False)
    problem = assemble_problem(grams, indicators, tuned.lam)
    t3 = time.perf_counter()
    solve_qp(problem)
    t4 = time.perf_counter()
    return {"tune": t2 - t1, "assemble": (t1 - t0) + (t3 - t2), "solve": t4 - t3}


def timing_study(seed: int = 0, t_grid=tuple(range(3, 11)), p_grid=tuple(range(3, 9)),
                 n: int = 100, repetitions: int = 10):
    """Median per-stage wall-clock times over T (p = 3) and over p (T = 5)."""
    rows = []
    for axis, grid in (("T", t_grid), ("p", p_grid)):
        for value in grid:
            T = value if axis == "T" else 5
            p = 3 if axis == "T" else value
            stage_times = {"tune": [], "assemble": [], "solve": []}
            for rep in range(repetitions):
                panel = draw(DgpSpec(scenario="linear", n=n, seed=(seed, int(axis == "p"), value, rep), T=T, p=p))
                timings = _timed_kow_run(panel)
                for stage, seconds in timings.items():
                    stage_times[stage].append(seconds)
            for stage, series in stage_times.items():
                rows.append(TimingRow(
                    axis=axis, value=value, stage=stage,
                    median_seconds=float(np.median(series)), repetitions=repetitions,
                ))
    return rows
