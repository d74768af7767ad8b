"""Shared-parameter Q-learning for multi-stage treatment regimens."""

from .diagnostics import ExpansionReport, hat_matrix, inf_operator_norm, nonexpansion_check
from .estimators import (
    FitConfig,
    FitResult,
    FitStatus,
    SingularDesignError,
    decision_rule,
    initial_values,
    ols_solve,
    penalized_q_shared_fit,
    policy,
    q_shared_fit,
    q_unshared_fit,
    ridge_solve,
)
from .model import (
    ModelSpec,
    ParameterVector,
    SmartDataset,
    StackedSystem,
    Trajectory,
    TreatmentCoding,
    assemble_stacked,
    primary_outcome,
    pseudo_outcome,
    recode,
    stage_features,
)
from .resampling import BootstrapSummary, CvResult, choose_m, m_out_of_n_bootstrap, select_lambda
from .simulator import Scenario, allocation_matching, generate_smart, oracle_policy, run_comparison

__version__ = "0.1.0"
