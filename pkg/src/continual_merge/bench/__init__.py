"""
Synthetic continual benchmark

Task suites, the continual merge loop with its accuracy matrix, ACC/BWT
metrics, additive-noise robustness scoring and the parallel sweeps built on
top of them.
"""

from .metrics import AccuracyMatrix, accuracy_trend, compute_metrics
from .runner import ContinualRun, RunReport, check_order, corruption_eval, run_continual
from .suite import (
    Task,
    TaskSuite,
    generate_suite,
    load_suite,
    save_suite,
    suite_from_config,
    suite_from_dict,
    suite_to_dict,
)
from .sweep import (
    ABLATION_ROWS,
    AGGREGATE_COLUMNS,
    DEFAULT_GAMMAS,
    AblationRow,
    SweepResult,
    aggregate,
    aggregate_csv,
    gamma_study,
    order_permutations,
    prior_gate_activation,
    run_ablation,
    sweep,
)

__all__ = [
    "ABLATION_ROWS",
    "AGGREGATE_COLUMNS",
    "DEFAULT_GAMMAS",
    "AblationRow",
    "AccuracyMatrix",
    "ContinualRun",
    "RunReport",
    "SweepResult",
    "Task",
    "TaskSuite",
    "accuracy_trend",
    "aggregate",
    "aggregate_csv",
    "check_order",
    "compute_metrics",
    "corruption_eval",
    "gamma_study",
    "generate_suite",
    "load_suite",
    "order_permutations",
    "prior_gate_activation",
    "run_ablation",
    "run_continual",
    "save_suite",
    "suite_from_config",
    "suite_from_dict",
    "suite_to_dict",
    "sweep",
]
