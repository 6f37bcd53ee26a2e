import numpy as np
import pytest

from kow.panel import LongitudinalPanel


def make_panel(treatment, confounders, censored=None, outcome=None, repeated=False,
               outcome_mask=None):
    """Build a panel from plain arrays, filling the bookkeeping fields."""
    a = np.asarray(treatment, dtype=float)
    x = np.asarray(confounders, dtype=float)
    n, T = a.shape
    c = np.zeros((n, T), dtype=np.int8) if censored is None else np.asarray(censored, dtype=np.int8)
    if outcome is None:
        outcome = np.zeros((n, T)) if repeated else np.zeros(n)
    outcome = np.asarray(outcome, dtype=float)
    if outcome_mask is None:
        outcome_mask = ~np.isnan(outcome)
    return LongitudinalPanel(
        treatment=a,
        confounders=x,
        censored=c,
        outcome=outcome,
        outcome_mask=np.asarray(outcome_mask, dtype=bool),
        repeated_outcomes=repeated,
        unit_ids=tuple(range(n)),
        confounder_names=tuple(f"x{j + 1}" for j in range(x.shape[2])),
    )


@pytest.fixture
def toy_panel():
    """3 units, 2 periods, 2 confounders, no censoring."""
    rng = np.random.default_rng(42)
    a = rng.integers(0, 2, size=(3, 2)).astype(float)
    x = rng.standard_normal((3, 2, 2))
    y = rng.standard_normal(3)
    return make_panel(a, x, outcome=y)


@pytest.fixture
def random_panel():
    """20 units, 3 periods, 2 confounders, random outcome."""
    rng = np.random.default_rng(7)
    a = rng.integers(0, 2, size=(20, 3)).astype(float)
    x = rng.standard_normal((20, 3, 2))
    y = rng.standard_normal(20)
    return make_panel(a, x, outcome=y)
