"""Deterministic convex QP solver for nonnegative weights.

Solves  min 1/2 W'QW - c'W  subject to  W >= 0  and optional equality
constraints  sum_{i in S_k} W_i = |S_k|  with a primal active-set method:

* warm start from W = e via projected gradient (bound-only problems), which
  both stays feasible and guesses the active set;
* equality constraints eliminated through a null-space basis, never
  penalized, so feasibility is exact;
* PSD-singular reduced systems solved by minimum-norm least squares, which
  breaks ties toward deterministic iterates;
* bounds that become active are snapped to exactly 0.

Identical inputs produce bitwise-identical weights: every choice point
(blocking constraint, multiplier removal) resolves ties by lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .balance import BalanceProblem

__all__ = ["QpSolution", "UniformLimitDiagnostic", "solve_qp", "uniform_limit_check"]

_PG_STEPS = 40


@dataclass(frozen=True)
class QpSolution:
    """Solver output with KKT certificates.

    status "optimal" guarantees all three residuals are within tolerance;
    "max-iter" returns the best iterate reached.  degenerate lists
    coordinates untouched by the objective (zero row and zero linear term)
    that were tie-broken toward W_i = 1.
    """

    weights: np.ndarray
    objective: float
    iterations: int
    status: str
    kkt_stationarity: float
    kkt_feasibility: float
    kkt_complementarity: float
    degenerate: tuple = ()


@dataclass(frozen=True)
class UniformLimitDiagnostic:
    """Deviation of solved weights from uniform along an ascending lambda grid."""

    lambdas: tuple
    max_abs_deviation: tuple
    l2_deviation: tuple


class QpInfeasibleError(RuntimeError):
    """The equality system admits no feasible nonnegative point."""


def _prepare_constraints(constraints, n):
    """Deduplicate identical sets, check disjointness, build the 0/1 matrix."""
    unique = []
    seen = set()
    for s in constraints:
        idx = np.asarray(s, dtype=int)
        if idx.size == 0:
            raise QpInfeasibleError("equality constraint over an empty index set")
        if idx.min() < 0 or idx.max() >= n:
            raise QpInfeasibleError("equality constraint indexes out of range")
        key = tuple(sorted(idx.tolist()))
        if key in seen:
            continue
        seen.add(key)
        unique.append(np.asarray(key, dtype=int))
    used = np.zeros(n, dtype=bool)
    for idx in unique:
        if used[idx].any():
            raise QpInfeasibleError("equality constraint sets must be disjoint or identical")
        used[idx] = True
    if not unique:
        return np.zeros((0, n)), np.zeros(0)
    A = np.zeros((len(unique), n))
    for k, idx in enumerate(unique):
        A[k, idx] = 1.0
    b = np.array([float(len(idx)) for idx in unique])
    return A, b


def _reduced_step(Q, g, free, A):
    """Direction on the free coordinates with A p = 0 (null-space elimination)."""
    H = Q[np.ix_(free, free)]
    gf = g[free]
    if A.shape[0] == 0:
        return _solve_psd(H, -gf), None
    Af = A[:, free]
    q_full, _ = np.linalg.qr(Af.T, mode="complete")
    Z = q_full[:, Af.shape[0]:]
    y = _solve_psd(Z.T @ H @ Z, -(Z.T @ gf))
    return Z @ y, Z


def _solve_psd(H, rhs):
    if H.shape[0] == 0:
        return np.zeros(0)
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    # singular PSD system: a relative ridge far below the KKT tolerance keeps
    # the step a descent direction and the factorization cheap; final
    # optimality is certified against the unmodified problem
    ridge = 1e-10 * max(float(np.abs(np.diag(H)).max()), 1.0)
    try:
        factor = scipy.linalg.cho_factor(
            H + ridge * np.eye(H.shape[0]), lower=True, check_finite=False
        )
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        d, v = np.linalg.eigh((H + H.T) / 2.0)
        cut = 1e-12 * max(d[-1], 0.0)
        inv = np.where(d > cut, 1.0 / np.where(d > cut, d, 1.0), 0.0)
        return v @ (inv * (v.T @ rhs))


def _multipliers(g, A, free, working):
    """Equality multipliers from the free rows, then bound multipliers."""
    if A.shape[0]:
        nu = np.linalg.lstsq(A[:, free].T, -g[free], rcond=None)[0]
        adjusted = g + A.T @ nu
    else:
        nu = None
        adjusted = g
    mu = np.zeros_like(g)
    mu[working] = adjusted[working]
    return mu, nu, adjusted


def solve_qp(
    problem: BalanceProblem,
    tol: float = 1e-8,
    max_iter: int | None = None,
    warm_start: np.ndarray | None = None,
) -> QpSolution:
    """Solve the balance QP to KKT optimality.

    tol is relative (scaled by 1 + ||c||_inf for stationarity).  max_iter
    defaults to 10 n.  warm_start seeds the iterate and active set from a
    previous solution (it is clipped to the feasible set first); output still
    depends only on the inputs.  Raises :class:`QpInfeasibleError` for broken
    equality systems; Q that is indefinite beyond PSD tolerance surfaces as a
    failed factorization plus a stationarity residual, never as a wrong
    "optimal".
    """
    Q = np.asarray(problem.Q, dtype=float)
    c = np.asarray(problem.c, dtype=float)
    n = c.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    A_full, b_full = _prepare_constraints(problem.constraints, n)
    constrained = A_full.sum(axis=0) > 0

    # coordinates the objective never touches: pin to 1 (uniform tie-break)
    qscale = max(np.abs(Q).max(), 1.0)
    cscale = max(np.abs(c).max(), 1.0)
    zero_row = (np.abs(Q).max(axis=1) <= 1e-14 * qscale) & ~constrained
    degenerate = zero_row & (np.abs(c) <= 1e-14 * cscale)
    if np.any(zero_row & (c > 1e-14 * cscale)):
        raise ValueError("objective is unbounded below on a zero row of Q")
    keep = ~degenerate
    idx_keep = np.flatnonzero(keep)
    remap = -np.ones(n, dtype=int)
    remap[idx_keep] = np.arange(idx_keep.size)
    Qr = Q[np.ix_(idx_keep, idx_keep)]
    cr = c[idx_keep]
    Ar = A_full[:, idx_keep]
    r = idx_keep.size

    x = np.ones(r)
    if warm_start is not None:
        x = np.maximum(np.asarray(warm_start, dtype=float)[idx_keep], 0.0)
        if A_full.shape[0] and np.abs(Ar @ x - b_full).max(initial=0.0) > 1e-9:
            x = np.ones(r)  # warm start infeasible for the equality system
    elif A_full.shape[0] == 0 and r:
        lipschitz = np.abs(Qr).sum(axis=1).max()
        if lipschitz > 0:
            step = 1.0 / lipschitz
            for _ in range(_PG_STEPS):
                x = np.maximum(0.0, x - step * (Qr @ x - cr))
    working = x == 0.0

    mu_tol = tol * (1.0 + float(np.abs(cr).max(initial=0.0)))
    status = "max-iter"
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        step_tol = tol * (1.0 + float(np.abs(x).max(initial=0.0)))
        free = ~working
        g = Qr @ x - cr
        p_free, _ = _reduced_step(Qr, g, free, Ar)
        if np.abs(p_free).max(initial=0.0) <= step_tol:
            mu, _, _ = _multipliers(g, Ar, free, working)
            worst = np.flatnonzero(working & (mu < -mu_tol))
            if worst.size == 0:
                status = "optimal"
                break
            release = worst[np.argmin(mu[worst])]
            working[release] = False
            continue
        p = np.zeros(r)
        p[free] = p_free
        blocking = np.flatnonzero(free & (p < -1e-14 * max(1.0, np.abs(p).max())))
        alpha = 1.0
        if blocking.size:
            ratios = x[blocking] / -p[blocking]
            best = ratios.min()
            if best < 1.0:
                alpha = best
        x = x + alpha * p
        hit = np.flatnonzero(~working & (x <= 1e-13 * (1.0 + np.abs(x).max())))
        if alpha < 1.0 and hit.size == 0:
            hit = blocking[[np.argmin(x[blocking] / -p[blocking])]]
        if hit.size:
            x[hit] = 0.0
            working[hit] = True

    if Ar.shape[0]:
        # restore exact equality feasibility (snapping perturbs it at fp scale)
        free = ~working
        resid = b_full - Ar @ x
        if np.abs(resid).max(initial=0.0) > 0.0:
            Af = Ar[:, free]
            corr = Af.T @ np.linalg.solve(Af @ Af.T, resid)
            x[free] = np.maximum(0.0, x[free] + corr)

    weights = np.ones(n)
    weights[idx_keep] = x
    mu_full = np.zeros(n)
    nu = None
    g_full = Q @ weights - c
    free_full = weights > 0
    if A_full.shape[0]:
        nu = np.linalg.lstsq(A_full[:, free_full].T, -g_full[free_full], rcond=None)[0]
        adjusted = g_full + A_full.T @ nu
    else:
        adjusted = g_full
    mu_full[~free_full] = np.maximum(adjusted[~free_full], 0.0)
    stationarity = float(np.abs(adjusted - mu_full).max(initial=0.0))
    feasibility = float(max(0.0, -weights.min(initial=0.0)))
    if A_full.shape[0]:
        feasibility = max(feasibility, float(np.abs(A_full @ weights - b_full).max()))
    complementarity = float(np.abs(mu_full * weights).max(initial=0.0))
    if status == "optimal" and stationarity > tol * (1.0 + float(np.abs(c).max(initial=0.0))):
        status = "max-iter"
    return QpSolution(
        weights=weights,
        objective=problem.objective(weights),
        iterations=iterations,
        status=status,
        kkt_stationarity=stationarity,
        kkt_feasibility=feasibility,
        kkt_complementarity=complementarity,
        degenerate=tuple(np.flatnonzero(degenerate).tolist()),
    )


def uniform_limit_check(problems, tol: float = 1e-8) -> UniformLimitDiagnostic:
    """Solve a family of problems along an ascending lambda grid.

    Reports max_i |W_i - 1| and ||W - e||_2 per lambda; at
    lambda = 1e6 ||K°|| the sup deviation is expected to be <= 1e-3 (the
    penalty dominates and the weights become uniform).
    """
    lambdas = [p.lam for p in problems]
    if any(l2 < l1 for l1, l2 in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda grid must be ascending")
    sup_dev = []
    l2_dev = []
    for p in problems:
        w = solve_qp(p, tol=tol).weights
        sup_dev.append(float(np.abs(w - 1.0).max()))
        l2_dev.append(float(np.linalg.norm(w - 1.0)))
    return UniformLimitDiagnostic(
        lambdas=tuple(lambdas),
        max_abs_deviation=tuple(sup_dev),
        l2_deviation=tuple(l2_dev),
    )
