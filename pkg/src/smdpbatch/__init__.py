"""Optimal dynamic batching for a GPU inference queue via average-cost SMDP."""
from .discretize import DtMdp, eta_bound, to_dtmdp
from .estimators import LinearProfileRegressor, QLearningBatchScheduler, SMDPBatchScheduler
from .exceptions import (
    BatchingError, ConfigError, DomainError, ExhaustionError, FitError, InstabilityError,
    ModelViolationError, PolicyFormatError, StabilityError, StructuralError,
)
from .model import FiniteSmdp, TruncationConfig, build_truncated, feasible_actions, stage_cost
from .policies import (
    Policy, detect_control_limit, load_policy, make_control_limit, make_static, make_work_conserving,
    save_policy,
)
from .profile import ServiceProfile, Weights, Workload, fit_linear_profile, load_profile, traffic_intensity
from .qlearn import QLearnConfig, policy_agreement, train
from .simulator import SimReport, replications, simulate, weighted_cost_interval
from .solver import (
    evaluate_policy, find_min_smax, relative_value_iteration, solve_truncated, stationary_distribution,
)

__version__ = "0.1.0"

__all__ = [
    "BatchingError", "ConfigError", "DomainError", "DtMdp", "ExhaustionError", "FiniteSmdp", "FitError",
    "InstabilityError", "LinearProfileRegressor", "ModelViolationError", "Policy", "PolicyFormatError",
    "QLearnConfig", "QLearningBatchScheduler", "SMDPBatchScheduler", "ServiceProfile", "SimReport",
    "StabilityError", "StructuralError", "TruncationConfig", "Weights", "Workload", "build_truncated",
    "detect_control_limit", "eta_bound", "evaluate_policy", "feasible_actions", "find_min_smax",
    "fit_linear_profile", "load_policy", "load_profile", "make_control_limit", "make_static",
    "make_work_conserving", "policy_agreement", "relative_value_iteration", "replications", "save_policy",
    "simulate", "solve_truncated", "stage_cost", "stationary_distribution", "to_dtmdp", "traffic_intensity",
    "train", "weighted_cost_interval", "__version__",
]
