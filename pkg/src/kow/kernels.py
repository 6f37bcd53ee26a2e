"""Product kernels on treatment/confounder histories and per-period gram matrices.

The period-t kernel is a product of a treatment-history factor and a
confounder-history factor,

    k_t(h, h') = (1 + sum_s a_s a'_s) * k2(x, x'),

where the sum runs over the lag window and is empty at t = 1 (so the
treatment factor is identically 1 there and the product form is uniform in
t), and k2 is one of

    linear    1 + theta * <x, x'>
    poly      (1 + theta * <x, x'>)^d
    gaussian  exp(-||x - x'||^2 / (2 gamma^2)).

The affine offsets matter: they put main effects of the confounder history
(not only treatment-confounder interactions) into the RKHS ball that the
balance objective controls, and give the tuned prior a constant component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import HistoryView, LongitudinalPanel, history_view

__all__ = ["KernelSpec", "GramMatrix", "GramValidationError", "eval_kernel", "gram"]

CONFOUNDER_KERNELS = ("linear", "poly", "gaussian")

# Relative floor on the smallest eigenvalue before a gram matrix is rejected.
PSD_TOLERANCE = 1e-8


class GramValidationError(RuntimeError):
    """A kernel matrix failed its positive-semidefiniteness check."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    theta scales the confounder inner product (linear and polynomial
    kernels); gamma is the gaussian bandwidth; lags bounds how much history
    enters each period's bundle (None means the full history).
    """

    confounder: str = "poly"
    degree: int = 2
    theta: float = 1.0
    gamma: float = 1.0
    lags: int | None = None
    treatment: str = "linear"

    def __post_init__(self):
        if self.treatment != "linear":
            raise ValueError(f"unsupported treatment kernel: {self.treatment!r}")
        if self.confounder not in CONFOUNDER_KERNELS:
            raise ValueError(f"unsupported confounder kernel: {self.confounder!r}")
        if self.confounder == "poly" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError("polynomial degree must be an integer >= 1")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.lags is not None and self.lags < 1:
            raise ValueError("lags must be >= 1")

    def resolve_lags(self, n_periods: int) -> int:
        return n_periods if self.lags is None else self.lags


@dataclass(frozen=True)
class GramMatrix:
    """n x n kernel matrix for one period, with the spec that produced it."""

    t: int
    matrix: np.ndarray
    spec: KernelSpec

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _confounder_factor(spec: KernelSpec, inner=None, sqdist=None):
    if spec.confounder == "linear":
        return 1.0 + spec.theta * inner
    if spec.confounder == "poly":
        return (1.0 + spec.theta * inner) ** spec.degree
    return np.exp(-sqdist / (2.0 * spec.gamma**2))


def eval_kernel(spec: KernelSpec, h_i, h_j) -> float:
    """Evaluate the product kernel on two history bundles.

    Each bundle is a (treatment-part, confounder-part) pair of 1-D arrays
    from the same period/lag configuration.
    """
    treat_i, conf_i = (np.asarray(part, dtype=float) for part in h_i)
    treat_j, conf_j = (np.asarray(part, dtype=float) for part in h_j)
    if treat_i.shape != treat_j.shape or conf_i.shape != conf_j.shape:
        raise ValueError("history bundles have mismatched dimensions")
    treat_factor = 1.0 + (float(treat_i @ treat_j) if treat_i.size else 0.0)
    if spec.confounder == "gaussian":
        diff = conf_i - conf_j
        conf_factor = _confounder_factor(spec, sqdist=float(diff @ diff))
    else:
        conf_factor = _confounder_factor(spec, inner=float(conf_i @ conf_j))
    return treat_factor * float(conf_factor)


def _pairwise_sqdist(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d, 0.0)


def gram_from_view(view: HistoryView, spec: KernelSpec, validate: bool = True) -> GramMatrix:
    """Build the gram matrix from an already-assembled history view."""
    if view.treat.shape[1] == 0:
        treat_factor = 1.0
    else:
        treat_factor = 1.0 + view.treat @ view.treat.T
    if spec.confounder == "gaussian":
        conf_factor = _confounder_factor(spec, sqdist=_pairwise_sqdist(view.conf))
    else:
        conf_factor = _confounder_factor(spec, inner=view.conf @ view.conf.T)
    matrix = np.asarray(treat_factor * conf_factor, dtype=float)
    matrix = (matrix + matrix.T) / 2.0  # exact symmetry
    if validate:
        _check_psd(matrix, view.t, spec)
    return GramMatrix(t=view.t, matrix=matrix, spec=spec)


def gram(panel: LongitudinalPanel, spec: KernelSpec, t: int, validate: bool = True) -> GramMatrix:
    """Gram matrix of the period-t kernel over all unit pairs.

    Expects a standardized panel.  Aborts with :class:`GramValidationError`
    if the matrix is not positive semidefinite within tolerance; valid kernels
    only fail this when the assembly itself is broken, so no silent projection
    is attempted.
    """
    view = history_view(panel, t, spec.resolve_lags(panel.n_periods))
    return gram_from_view(view, spec, validate=validate)


def _check_psd(matrix: np.ndarray, t: int, spec: KernelSpec) -> None:
    eigs = np.linalg.eigvalsh(matrix)
    scale = max(abs(eigs[0]), abs(eigs[-1]))
    if eigs[0] < -PSD_TOLERANCE * scale:
        raise GramValidationError(
            f"gram matrix for period {t} ({spec.confounder} kernel) has eigenvalue "
            f"{eigs[0]:.3e} below -{PSD_TOLERANCE:.0e} * ||K||"
        )
