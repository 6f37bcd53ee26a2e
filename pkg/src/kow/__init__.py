"""Kernel optimal weighting for marginal structural models.

Weights for fitting an MSM with a binary time-varying treatment are found by
minimizing the worst-case covariate imbalance over RKHS unit balls plus a
penalty on deviation from uniform weights, solved as a nonnegative convex QP.
Includes the informative-censoring extension, IPTW/sIPTW baselines, weighted
least-squares MSM fitting with sandwich errors, marginal-likelihood
hyperparameter tuning, and a replication-study harness.
"""

__version__ = "0.1.0"

from .balance import (
    BalanceProblem,
    ImbalanceReport,
    TreatmentIndicator,
    assemble_problem,
    build_indicator,
    build_indicators,
    empirical_discrepancy,
    imbalance_report,
    worst_case_discrepancy,
)
from .baselines import LogisticModel, WeightSet, design_matrix, fit_logistic, iptw_weights
from .estimators import InverseProbabilityWeights, KernelOptimalWeights, MsmEstimator
from .kernels import GramMatrix, GramValidationError, KernelSpec, eval_kernel, gram
from .msm import EstimateConfig, EstimateResult, MsmFit, StageError, estimate_effect, fit_msm
from .panel import (
    HistoryView,
    LongitudinalPanel,
    PanelValidationError,
    StandardizationReport,
    history_view,
    load_panel,
    standardize,
    write_panel,
)
from .qp import QpInfeasibleError, QpSolution, UniformLimitDiagnostic, solve_qp, uniform_limit_check
from .simulate import (
    TRUE_EFFECT,
    DgpSpec,
    ReplicationResult,
    ReplicationStudy,
    ReplicationSummary,
    draw,
    methods_for,
    replicate,
    timing_study,
)
from .tuner import (
    PeriodGramBuilder,
    TuneResult,
    TuningError,
    lml_and_gradient,
    log_marginal_likelihood,
    tune,
)

__all__ = [
    "__version__",
    "BalanceProblem", "ImbalanceReport", "TreatmentIndicator", "assemble_problem",
    "build_indicator", "build_indicators", "empirical_discrepancy", "imbalance_report",
    "worst_case_discrepancy",
    "LogisticModel", "WeightSet", "design_matrix", "fit_logistic", "iptw_weights",
    "InverseProbabilityWeights", "KernelOptimalWeights", "MsmEstimator",
    "GramMatrix", "GramValidationError", "KernelSpec", "eval_kernel", "gram",
    "EstimateConfig", "EstimateResult", "MsmFit", "StageError", "estimate_effect", "fit_msm",
    "HistoryView", "LongitudinalPanel", "PanelValidationError", "StandardizationReport",
    "history_view", "load_panel", "standardize", "write_panel",
    "QpInfeasibleError", "QpSolution", "UniformLimitDiagnostic", "solve_qp", "uniform_limit_check",
    "TRUE_EFFECT", "DgpSpec", "ReplicationResult", "ReplicationStudy", "ReplicationSummary",
    "draw", "methods_for", "replicate", "timing_study",
    "PeriodGramBuilder", "TuneResult", "TuningError", "lml_and_gradient",
    "log_marginal_likelihood", "tune",
]
