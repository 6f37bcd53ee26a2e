"""Empirical discrepancies, worst-case imbalance, and assembly of the weight QP.

For weights W and a function h of the period-t history, the sample moment
discrepancy is

    t = 1 :  (1/n) sum_i W_i 1[A_i1 = a] h_i  -  (1/n) sum_i h_i
    t >= 2:  (1/n) sum_i (W_i 1[A_it = a] - W_i) h_i

(the t = 1 reference sum is unweighted; the asymmetry is deliberate).  Under
an RKHS unit-ball sup over h, the squared worst case becomes a quadratic form
in W built from the period's gram matrix sandwiched between treatment-arm
indicator diagonals, and the total worst-case imbalance is

    B^2(W) = 1/2 sum_t (Delta_0^(t)^2 + Delta_1^(t)^2).

The informative-censoring variant restricts the arm indicator to units still
uncensored at t and the reference indicator to units uncensored at t-1; both
diagonals are kept separate so each is testable.

The assembled QP is  min_{W >= 0}  1/2 W'QW - c'W  with  Q = K° + 2 lambda I
and c = K1-row-sums plus 2 lambda (the whole objective is in the n^2-scaled
convention; reports divide by n^2 so B^2 stays interpretable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kernels import GramMatrix
from .panel import LongitudinalPanel

__all__ = [
    "TreatmentIndicator",
    "BalanceProblem",
    "ImbalanceReport",
    "build_indicator",
    "build_indicators",
    "empirical_discrepancy",
    "worst_case_discrepancy",
    "assemble_problem",
    "imbalance_report",
]

# Quadratic forms this far below zero signal broken PSD assembly, not rounding.
NEGATIVE_FORM_TOLERANCE = -1e-10


@dataclass(frozen=True)
class TreatmentIndicator:
    """Diagonal indicator data for one (period, arm) pair.

    treated:   1[A_it = a] (uncensored) or 1[A_it = a] 1[C_it = 0] (censored).
    reference: all-ones (uncensored) or 1[C_{i,t-1} = 0] (censored); at t = 1
               the reference side is the unweighted population term.
    """

    t: int
    a: int
    treated: np.ndarray
    reference: np.ndarray
    censored_mode: bool

    def __post_init__(self):
        for diag in (self.treated, self.reference):
            if not np.isin(diag, (0, 1)).all():
                raise ValueError("indicator diagonals must be 0/1")
        if np.any(self.treated > self.reference) and self.t > 1 and self.censored_mode:
            raise ValueError("treated indicator exceeds at-risk reference (censoring not monotone)")


def build_indicator(panel: LongitudinalPanel, t: int, a: int, censored: bool) -> TreatmentIndicator:
    arm = np.where(np.nan_to_num(panel.treatment[:, t - 1], nan=-1.0) == a, 1.0, 0.0)
    if censored:
        treated = arm * (panel.censored[:, t - 1] == 0)
        reference = panel.at_risk(t).astype(float)
    else:
        treated = arm
        reference = np.ones(panel.n)
    return TreatmentIndicator(t=t, a=a, treated=treated, reference=reference, censored_mode=censored)


def build_indicators(panel: LongitudinalPanel, censored: bool, periods=None):
    """Indicator pairs (arm 0, arm 1) for each requested period."""
    periods = range(1, panel.n_periods + 1) if periods is None else periods
    return [
        (build_indicator(panel, t, 0, censored), build_indicator(panel, t, 1, censored))
        for t in periods
    ]


def empirical_discrepancy(
    panel: LongitudinalPanel,
    weights: np.ndarray,
    t: int,
    a: int,
    h: np.ndarray,
    censored: bool = False,
    reference_weights: np.ndarray | None = None,
) -> float:
    """Sample moment discrepancy for arm a at period t under function values h.

    ``reference_weights`` substitutes a different weight vector in the
    reference sum (t >= 2 only); by default the same weights appear on both
    sides, exactly as the objective uses them.  Passing the one-period-shorter
    cumulative inverse-propensity product there makes the oracle discrepancy
    of sequentially randomized data vanish term by term.
    """
    weights = np.asarray(weights, dtype=float)
    h = np.asarray(h, dtype=float)
    if weights.shape != (panel.n,) or h.shape != (panel.n,):
        raise ValueError("weights and h must have length n")
    ind = build_indicator(panel, t, a, censored)
    n = panel.n
    if t == 1:
        return float(weights @ (ind.treated * h) - h.sum()) / n
    ref_w = weights if reference_weights is None else np.asarray(reference_weights, dtype=float)
    return float(weights @ (ind.treated * h) - ref_w @ (ind.reference * h)) / n


def _discrepancy_form(weights, gram: GramMatrix, indicator: TreatmentIndicator) -> float:
    """Squared worst-case discrepancy in the 1/n^2 scale."""
    K = gram.matrix
    n = K.shape[0]
    if indicator.t == 1:
        z = indicator.treated * weights - 1.0
    else:
        z = (indicator.treated - indicator.reference) * weights
    return float(z @ K @ z) / (n * n)


def worst_case_discrepancy(weights, gram: GramMatrix, indicator: TreatmentIndicator) -> float:
    """Worst-case discrepancy Delta_a^(t)(W) >= 0 over the RKHS unit ball."""
    if gram.t != indicator.t:
        raise ValueError(f"gram is for period {gram.t}, indicator for period {indicator.t}")
    form = _discrepancy_form(np.asarray(weights, dtype=float), gram, indicator)
    if form < NEGATIVE_FORM_TOLERANCE:
        raise ValueError(f"quadratic form {form:.3e} below tolerance: PSD assembly is broken")
    return float(np.sqrt(max(form, 0.0)))


@dataclass(frozen=True)
class BalanceProblem:
    """Data of the weight QP  min_{W >= 0} 1/2 W'QW - c'W  (+ equality sets).

    constraints holds index arrays S with the contract sum_{i in S} W_i = |S|
    (per-period mean-one normalization).  constant records the dropped offset
    e'K1e so the n^2-scaled objective can be mapped back to B^2 + penalty
    exactly.
    """

    Q: np.ndarray
    c: np.ndarray
    lam: float
    constraints: tuple = ()
    constant: float = 0.0
    mode: str = "uncensored"

    def __post_init__(self):
        if self.Q.shape != (self.n, self.n):
            raise ValueError("Q must be square and match c")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for s in self.constraints:
            if len(s) == 0:
                raise ValueError("equality constraint over an empty index set")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def objective(self, weights: np.ndarray) -> float:
        weights = np.asarray(weights, dtype=float)
        return float(0.5 * weights @ self.Q @ weights - self.c @ weights)

    def to_json(self, include_matrices: bool = False) -> str:
        payload = {
            "n": self.n,
            "lambda": self.lam,
            "mode": self.mode,
            "constant": self.constant,
            "constraints": [np.asarray(s).tolist() for s in self.constraints],
        }
        if include_matrices:
            if self.n > 200:
                raise ValueError("matrix dumps are limited to n <= 200")
            payload["Q"] = self.Q.tolist()
            payload["c"] = self.c.tolist()
        return json.dumps(payload, sort_keys=True)


def assemble_problem(
    grams,
    indicators,
    lam: float,
    mode: str = "uncensored",
    normalization=None,
) -> BalanceProblem:
    """Assemble Q, c and constraints from per-period grams and indicators.

    grams and indicators must be aligned, period 1 first.  Per period,
    K°_t zeroes every K_t entry whose units sit in different arms (both in
    the same arm keeps it); summing over periods and adding 2 lambda I gives
    Q.  The linear term comes from the period-1 kernel against the unweighted
    population, restricted to the period-1 at-risk units in censored mode.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if len(grams) != len(indicators):
        raise ValueError("grams and indicators must cover the same periods")
    n = grams[0].n
    K_circ = np.zeros((n, n))
    c0 = None
    constant = None
    for gram_t, (ind0, ind1) in zip(grams, indicators):
        if gram_t.t != ind0.t or gram_t.t != ind1.t:
            raise ValueError(f"gram/indicator period mismatch at t={gram_t.t}")
        K = gram_t.matrix
        if gram_t.t == 1:
            for ind in (ind0, ind1):
                m = ind.treated
                K_circ += (m[:, None] * m[None, :]) * K
            # 1[A=0] + 1[A=1] restricted to period-1 uncensored units; all ones
            # in uncensored mode.  The indicator masks coordinates, so units
            # censored at period 1 get a zero linear term.
            u1 = ind0.treated + ind1.treated
            c0 = u1 * (K @ np.ones(n))
            constant = float(np.ones(n) @ K @ np.ones(n))
        else:
            for ind in (ind0, ind1):
                d = ind.reference - ind.treated
                K_circ += (d[:, None] * d[None, :]) * K
    if c0 is None:
        raise ValueError("period 1 gram is required")
    K_circ = (K_circ + K_circ.T) / 2.0
    Q = K_circ + 2.0 * lam * np.eye(n)
    c = c0 + 2.0 * lam * np.ones(n)
    constraints = ()
    if normalization is not None:
        constraints = tuple(np.flatnonzero(np.asarray(mask)) for mask in normalization)
    return BalanceProblem(Q=Q, c=c, lam=lam, constraints=constraints, constant=constant, mode=mode)


@dataclass(frozen=True)
class ImbalanceReport:
    """Per-(period, arm) worst-case discrepancies and their total B^2."""

    entries: tuple  # of (t, a, delta)
    total: float
    lam: float = 0.0

    def delta(self, t: int, a: int) -> float:
        for entry_t, entry_a, value in self.entries:
            if entry_t == t and entry_a == a:
                return value
        raise KeyError((t, a))

    def to_dict(self) -> dict:
        return {
            "b2": self.total,
            "entries": [{"t": t, "a": a, "delta": d} for t, a, d in self.entries],
        }


def imbalance_report(weights, grams, indicators) -> ImbalanceReport:
    """Worst-case discrepancy of every (period, arm) plus B^2 = 1/2 sum Delta^2."""
    weights = np.asarray(weights, dtype=float)
    entries = []
    total = 0.0
    for gram_t, pair in zip(grams, indicators):
        for ind in pair:
            delta = worst_case_discrepancy(weights, gram_t, ind)
            entries.append((ind.t, ind.a, delta))
            total += 0.5 * delta**2
    return ImbalanceReport(entries=tuple(entries), total=total)
