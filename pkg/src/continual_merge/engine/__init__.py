"""
Gated low-rank expert merging

Expert construction from projected task vectors, the gated merged forward
pass, the KL test-time objective with its exact gate gradients, and the
per-task adapt-and-freeze procedure.
"""

from .adaptation import GATE_POLICIES, Adam, MingleConfig, MingleMerger, adapt_task, gate_weight_step
from .checkpoint import load_merged, merged_from_dict, merged_to_dict, save_merged
from .experts import LowRankExpert, PriorSum, build_expert, build_layer_expert
from .mixture import (
    ExpertSlot,
    GateGradients,
    GateState,
    MergedModel,
    MixtureRecord,
    SeedBuffer,
    gate_activation_matrix,
    gate_gradients,
    interference,
    kl_adaptation_loss,
    kl_and_gate_gradients,
    merged_forward,
    merged_predict,
)

__all__ = [
    "GATE_POLICIES",
    "Adam",
    "ExpertSlot",
    "GateGradients",
    "GateState",
    "LowRankExpert",
    "MergedModel",
    "MingleConfig",
    "MingleMerger",
    "MixtureRecord",
    "PriorSum",
    "SeedBuffer",
    "adapt_task",
    "build_expert",
    "build_layer_expert",
    "gate_activation_matrix",
    "gate_gradients",
    "gate_weight_step",
    "interference",
    "kl_adaptation_loss",
    "kl_and_gate_gradients",
    "load_merged",
    "merged_forward",
    "merged_from_dict",
    "merged_predict",
    "merged_to_dict",
    "save_merged",
]
