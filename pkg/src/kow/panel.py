"""Longitudinal panel data: ingestion, validation, scaling, history views.

The canonical in-memory form is wide: one row per unit, arrays indexed by
period t = 1..T.  Cells that are undefined under censoring (X after dropout,
A at and after dropout) hold NaN and are tracked through explicit masks, never
sentinel values.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "PanelValidationError",
    "LongitudinalPanel",
    "StandardizationReport",
    "HistoryView",
    "load_panel",
    "write_panel",
    "standardize",
    "history_view",
]

DEFAULT_COLUMNS = {
    "unit": "unit",
    "time": "time",
    "treatment": "treat",
    "censor": "censor",
    "outcome": "outcome",
}


class PanelValidationError(ValueError):
    """Input data violate the panel contract."""


@dataclass(frozen=True)
class LongitudinalPanel:
    """Trajectories of treatments, confounders, censoring and outcomes.

    treatment:   (n, T) float, 0/1 where defined, NaN where censoring removed it
    confounders: (n, T, p) float, NaN where undefined; period 1 holds the
                 time-invariant confounders
    censored:    (n, T) int8, monotone in t, with the convention C[i, 0] = 0
                 for the virtual period before the study
    outcome:     (n,) in final-outcome mode, (n, T) in repeated-outcome mode
    outcome_mask: availability of each outcome cell
    """

    treatment: np.ndarray
    confounders: np.ndarray
    censored: np.ndarray
    outcome: np.ndarray
    outcome_mask: np.ndarray
    repeated_outcomes: bool
    unit_ids: tuple
    confounder_names: tuple

    def __post_init__(self):
        _validate_panel(self)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_periods(self) -> int:
        return self.treatment.shape[1]

    @property
    def n_confounders(self) -> int:
        return self.confounders.shape[2]

    @property
    def has_censoring(self) -> bool:
        return bool(self.censored.any())

    def at_risk(self, t: int) -> np.ndarray:
        """Units uncensored at t-1, i.e. with X_t defined (C[i, 0] = 0)."""
        if t == 1:
            return np.ones(self.n, dtype=bool)
        return self.censored[:, t - 2] == 0

    def uncensored(self, t: int) -> np.ndarray:
        """Units still uncensored at t, i.e. with A_t defined."""
        return self.censored[:, t - 1] == 0


@dataclass(frozen=True)
class StandardizationReport:
    """Per-column scaling statistics (pooled over person-periods).

    The standard deviation uses the population convention (divide by the
    number of defined cells).  Zero-variance columns are mapped to all zeros
    and listed in ``zero_variance``.
    """

    means: np.ndarray
    stds: np.ndarray
    zero_variance: tuple
    sd_convention: str = "population"


@dataclass(frozen=True)
class HistoryView:
    """Per-unit feature bundles entering the period-t kernel.

    treat: (n, m) lagged treatments A_{max(1,t-l)} .. A_{t-1}; m = 0 at t = 1.
    conf:  (n, q) time-invariant confounders X_1 followed by
           X_{max(2,t-l+1)} .. X_t.
    defined: units whose bundle is fully observed (uncensored at t-1);
           undefined cells are zero-filled.
    """

    t: int
    lags: int
    treat: np.ndarray
    conf: np.ndarray
    defined: np.ndarray


def _validate_panel(panel: LongitudinalPanel) -> None:
    a, x, c = panel.treatment, panel.confounders, panel.censored
    n, T = a.shape
    if x.shape[0] != n or x.shape[1] != T:
        raise PanelValidationError("confounder array shape does not match treatment array")
    if c.shape != (n, T):
        raise PanelValidationError("censor array shape does not match treatment array")
    if not np.isin(c, (0, 1)).all():
        raise PanelValidationError("censor indicators must be 0/1")
    if T > 1 and np.any(c[:, :-1] > c[:, 1:]):
        raise PanelValidationError("non-monotone censoring")
    defined_a = ~np.isnan(a)
    if not np.isin(a[defined_a], (0.0, 1.0)).all():
        raise PanelValidationError("non-binary treatment")
    if np.any((c == 0) & ~defined_a):
        raise PanelValidationError("treatment missing for an uncensored unit-period")
    # X_t must be defined (finite) whenever C_{t-1} = 0
    at_risk = np.ones((n, T), dtype=bool)
    at_risk[:, 1:] = c[:, :-1] == 0
    if not np.isfinite(x[at_risk]).all():
        raise PanelValidationError("missing or non-finite confounder in a defined cell")
    if panel.repeated_outcomes:
        if panel.outcome.shape != (n, T):
            raise PanelValidationError("repeated-outcome array must be (n, T)")
    elif panel.outcome.shape != (n,):
        raise PanelValidationError("final-outcome array must have length n")
    if panel.outcome_mask.shape != panel.outcome.shape:
        raise PanelValidationError("outcome mask shape does not match outcome")
    if not np.isfinite(panel.outcome[panel.outcome_mask]).all():
        raise PanelValidationError("non-finite outcome in an available cell")


def _natural_confounder_order(names):
    def key(name):
        m = re.match(r"^(.*?)(\d+)$", name)
        return (m.group(1), int(m.group(2))) if m else (name, 0)

    return sorted(names, key=key)


def load_panel(path, schema=None, repeated_outcomes=False) -> LongitudinalPanel:
    """Read a long-format CSV into the canonical wide representation.

    Expected columns are ``unit,time,treat,censor,outcome,x1..xp`` (header
    required, empty string for missing cells).  ``schema`` remaps the fixed
    column names and may list the confounder columns explicitly under the key
    ``"confounders"``; by default every column outside the fixed five is a
    confounder, taken in natural (numeric-suffix) order.
    """
    columns = dict(DEFAULT_COLUMNS)
    conf_cols = None
    if schema:
        for key, value in schema.items():
            if key == "confounders":
                conf_cols = list(value)
            elif key in columns:
                columns[key] = value
            else:
                raise PanelValidationError(f"unknown schema key: {key!r}")

    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise PanelValidationError("empty file: header row required")
        header = list(reader.fieldnames)
        rows = list(reader)

    for role in ("unit", "time", "treatment"):
        if columns[role] not in header:
            raise PanelValidationError(f"missing required column: {columns[role]!r}")
    has_censor = columns["censor"] in header
    has_outcome = columns["outcome"] in header
    if conf_cols is None:
        fixed = {columns[k] for k in columns}
        conf_cols = _natural_confounder_order([h for h in header if h not in fixed])
    missing = [c for c in conf_cols if c not in header]
    if missing:
        raise PanelValidationError(f"missing required column: {missing[0]!r}")

    def cell(row, name):
        value = row.get(name, "")
        return None if value is None or value.strip() == "" else value

    seen = {}
    times = set()
    for idx, row in enumerate(rows):
        unit = cell(row, columns["unit"])
        time = cell(row, columns["time"])
        if unit is None or time is None:
            raise PanelValidationError(f"row {idx + 2}: unit and time are required")
        try:
            time = int(time)
        except ValueError:
            raise PanelValidationError(f"row {idx + 2}: non-integer time {time!r}") from None
        if (unit, time) in seen:
            raise PanelValidationError(f"duplicate (unit, time) rows: ({unit}, {time})")
        seen[(unit, time)] = row
        times.add(time)

    if not times:
        raise PanelValidationError("no data rows")
    T = max(times)
    if times != set(range(1, T + 1)):
        raise PanelValidationError("time periods must be contiguous 1..T")
    unit_ids = sorted({u for (u, _) in seen})
    n, p = len(unit_ids), len(conf_cols)

    a = np.full((n, T), np.nan)
    x = np.full((n, T, p), np.nan)
    c = np.zeros((n, T), dtype=np.int8)
    y_rep = np.full((n, T), np.nan)
    for i, unit in enumerate(unit_ids):
        for t in range(1, T + 1):
            row = seen.get((unit, t))
            if row is None:
                raise PanelValidationError(f"time periods must be contiguous 1..T (unit {unit})")
            treat = cell(row, columns["treatment"])
            if treat is not None:
                a[i, t - 1] = float(treat)
            if has_censor:
                cens = cell(row, columns["censor"])
                c[i, t - 1] = int(float(cens)) if cens is not None else 0
            for j, name in enumerate(conf_cols):
                value = cell(row, name)
                if value is not None:
                    x[i, t - 1, j] = float(value)
            if has_outcome:
                value = cell(row, columns["outcome"])
                if value is not None:
                    y_rep[i, t - 1] = float(value)

    if repeated_outcomes:
        outcome = y_rep
        mask = ~np.isnan(y_rep)
    else:
        # final-outcome mode reads the value recorded on the last-period row
        outcome = y_rep[:, T - 1]
        mask = ~np.isnan(outcome)

    return LongitudinalPanel(
        treatment=a,
        confounders=x,
        censored=c,
        outcome=outcome,
        outcome_mask=mask,
        repeated_outcomes=repeated_outcomes,
        unit_ids=tuple(unit_ids),
        confounder_names=tuple(conf_cols),
    )


def write_panel(panel: LongitudinalPanel, path) -> None:
    """Write the canonical long-format CSV (inverse of :func:`load_panel`)."""

    def fmt(value):
        return "" if value is None or (isinstance(value, float) and np.isnan(value)) else repr(float(value))

    names = panel.confounder_names or tuple(f"x{j + 1}" for j in range(panel.n_confounders))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["unit", "time", "treat", "censor", "outcome", *names])
        for i, unit in enumerate(panel.unit_ids):
            for t in range(1, panel.n_periods + 1):
                if panel.repeated_outcomes:
                    y = panel.outcome[i, t - 1] if panel.outcome_mask[i, t - 1] else None
                else:
                    y = panel.outcome[i] if (t == panel.n_periods and panel.outcome_mask[i]) else None
                writer.writerow(
                    [
                        unit,
                        t,
                        fmt(panel.treatment[i, t - 1]),
                        int(panel.censored[i, t - 1]),
                        fmt(y),
                        *[fmt(v) for v in panel.confounders[i, t - 1]],
                    ]
                )


def standardize(panel: LongitudinalPanel):
    """Rescale every confounder column to mean 0, variance 1.

    Statistics are pooled over all defined person-period cells of a column
    (documented convention; the alternative would be per-period scaling).
    Treatments and outcomes are untouched.  Zero-variance columns map to all
    zeros and are flagged in the report rather than raising.

    Returns the scaled panel and a :class:`StandardizationReport`.
    """
    x = panel.confounders
    n, T, p = x.shape
    flat = x.reshape(n * T, p)
    defined = ~np.isnan(flat)
    means = np.empty(p)
    stds = np.empty(p)
    zero_variance = []
    scaled = np.full_like(flat, np.nan)
    for j in range(p):
        col = flat[defined[:, j], j]
        means[j] = col.mean() if col.size else 0.0
        stds[j] = col.std() if col.size else 0.0  # population sd
        if stds[j] <= 1e-12 * max(1.0, abs(means[j])):
            stds[j] = 0.0
            zero_variance.append(j)
            scaled[defined[:, j], j] = 0.0
        else:
            scaled[defined[:, j], j] = (col - means[j]) / stds[j]
    report = StandardizationReport(means=means, stds=stds, zero_variance=tuple(zero_variance))
    return replace(panel, confounders=scaled.reshape(n, T, p)), report


def history_view(panel: LongitudinalPanel, t: int, lags: int) -> HistoryView:
    """Assemble the treatment/confounder bundles entering the period-t kernel.

    For unit i the bundle is (A_{i,max(1,t-l)} .. A_{i,t-1}) and
    (X_{i,1}, X_{i,max(2,t-l+1)} .. X_{i,t}); at t = 1 the treatment part is
    empty.  Cells undefined under censoring are zero-filled; the indicator
    algebra downstream guarantees they never contribute.
    """
    if not 1 <= t <= panel.n_periods:
        raise ValueError(f"period t={t} out of range 1..{panel.n_periods}")
    if lags < 1:
        raise ValueError("lags must be >= 1")
    n = panel.n
    treat_periods = range(max(1, t - lags), t)
    treat = np.zeros((n, len(treat_periods)))
    for j, s in enumerate(treat_periods):
        treat[:, j] = np.nan_to_num(panel.treatment[:, s - 1], nan=0.0)
    conf_periods = [1] + [s for s in range(max(2, t - lags + 1), t + 1)]
    blocks = [np.nan_to_num(panel.confounders[:, s - 1, :], nan=0.0) for s in conf_periods]
    conf = np.concatenate(blocks, axis=1)
    return HistoryView(t=t, lags=lags, treat=treat, conf=conf, defined=panel.at_risk(t))
