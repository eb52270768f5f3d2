"""
Continual Merge

Sequential model merging without training data: fine-tuned task models are
folded one at a time into a shared backbone, either by parameter-space
baselines (SWA, task arithmetic, Ties, MagMax, orthogonal projection) or as
gated low-rank experts whose gates are fitted at test time on a handful of
unlabeled samples under a relaxed null-space constraint.

Also ships the routing-risk calculator for hard-routed mixtures and a
synthetic benchmark harness reporting ACC and BWT.
"""

__version__ = "0.3.0"
__author__ = "Continual Merge Team"

from .config import METHODS, ConfigLoader, RunConfig, create_run_config
from .errors import (
    ArtifactError,
    ConfigurationError,
    ErrorHandler,
    MergeError,
    NumericalError,
    ValidationError,
)
from .models import ModelParams, PrototypeHead, finetune, forward, init_model, make_head
from .mergers import ContinualMerger, MergeConfig, task_vector
from .engine import MergedModel, MingleConfig, MingleMerger, SeedBuffer, build_expert
from .nullspace import NullSpaceProjector, SubspaceBank
from .theory import RiskSpec, moe_risk_closed_form, moe_risk_monte_carlo, superiority_condition
from .bench import (
    ContinualRun,
    RunReport,
    TaskSuite,
    generate_suite,
    run_ablation,
    run_continual,
    suite_from_config,
    sweep,
)

__all__ = [
    "__version__",
    "METHODS",
    "ArtifactError",
    "ConfigLoader",
    "ConfigurationError",
    "ContinualMerger",
    "ContinualRun",
    "ErrorHandler",
    "MergeConfig",
    "MergeError",
    "MergedModel",
    "MingleConfig",
    "MingleMerger",
    "ModelParams",
    "NullSpaceProjector",
    "NumericalError",
    "PrototypeHead",
    "RiskSpec",
    "RunConfig",
    "RunReport",
    "SeedBuffer",
    "SubspaceBank",
    "TaskSuite",
    "ValidationError",
    "build_expert",
    "create_run_config",
    "finetune",
    "forward",
    "generate_suite",
    "init_model",
    "make_head",
    "moe_risk_closed_form",
    "moe_risk_monte_carlo",
    "run_ablation",
    "run_continual",
    "suite_from_config",
    "superiority_condition",
    "sweep",
    "task_vector",
]
