"""
Gated mixture of low-rank experts

Each gated layer computes base(x) + Σ_i g_i(x)·f_i(x) with a raw linear gate
g_i(x) = w_i·x + b_i. This module holds the merged model, its forward pass,
the KL adaptation objective and the exact gradients of that objective with
respect to the unfrozen gates.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import CommonErrors, ValidationError
from ..models import (
    ForwardRecord,
    ModelParams,
    PrototypeHead,
    cosine_backward,
    cosine_logits,
    forward,
    log_softmax,
    relu,
)
from .experts import LowRankExpert, PriorSum

logger = logging.getLogger(__name__)


@dataclass
class GateState:
    weight: np.ndarray
    bias: float = 0.0
    frozen: bool = False

    @classmethod
    def zeros(cls, d_in: int) -> "GateState":
        return cls(np.zeros(d_in), 0.0, False)

    @classmethod
    def unit(cls, d_in: int) -> "GateState":
        """Constant gate g(x) = 1, frozen"""
        return cls(np.zeros(d_in), 1.0, True)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weight + self.bias

    def copy(self) -> "GateState":
        return GateState(self.weight.copy(), float(self.bias), self.frozen)


@dataclass
class ExpertSlot:
    task: int
    expert: LowRankExpert
    gate: GateState


@dataclass
class MergedModel:
    """Frozen base, per-layer (expert, gate) slots in task order, shared head"""
    base: ModelParams
    head: PrototypeHead
    slots: List[List[ExpertSlot]] = field(default_factory=list)
    gated_layers: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.slots:
            self.slots = [[] for _ in self.base.layers]
        if not self.gated_layers:
            self.gated_layers = list(range(len(self.base.layers)))

    @property
    def num_tasks(self) -> int:
        return max((len(s) for s in self.slots), default=0)

    def add_task(self, experts: Dict[int, LowRankExpert], unit_gates: bool = False) -> int:
        """Append one expert per gated layer with a zero (or constant unit) gate"""
        task = self.num_tasks
        missing = set(self.gated_layers) - set(experts)
        if missing:
            raise ValidationError(f"experts missing for gated layers {sorted(missing)}", parameter="experts")
        for l in self.gated_layers:
            expert = experts[l]
            d_in = self.base.layers[l].weight.shape[1]
            gate = GateState.unit(d_in) if unit_gates else GateState.zeros(d_in)
            self.slots[l].append(ExpertSlot(task, expert, gate))
        return task

    def unfrozen_tasks(self) -> List[int]:
        tasks = {slot.task for layer in self.slots for slot in layer if not slot.gate.frozen}
        return sorted(tasks)

    def freeze(self, task: Optional[int] = None) -> None:
        for layer in self.slots:
            for slot in layer:
                if task is None or slot.task == task:
                    slot.gate.frozen = True

    def expert_sums(self) -> Dict[int, PriorSum]:
        sums: Dict[int, PriorSum] = {}
        for l in self.gated_layers:
            layer = self.base.layers[l]
            weight = np.zeros_like(layer.weight)
            bias = np.zeros_like(layer.bias)
            for slot in self.slots[l]:
                weight += slot.expert.dense()
                bias += slot.expert.bias
            sums[l] = (weight, bias)
        return sums

    def expert_checksums(self) -> List[List[str]]:
        return [[slot.expert.checksum() for slot in layer] for layer in self.slots]

    def copy(self) -> "MergedModel":
        return MergedModel(
            base=self.base.copy(),
            head=self.head,
            slots=[[ExpertSlot(s.task, s.expert, s.gate.copy()) for s in layer] for layer in self.slots],
            gated_layers=list(self.gated_layers),
        )


@dataclass
class SeedBuffer:
    """Unlabeled inputs drawn from the current task's test pool"""
    inputs: np.ndarray
    class_ids: List[int]
    per_class: int = 5
    pool_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise CommonErrors.empty_input("seed buffer")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @classmethod
    def draw(cls, inputs: np.ndarray, labels: np.ndarray, class_ids: Sequence[int],
             per_class: int, rng_seed: int) -> "SeedBuffer":
        """
        Draw per_class samples of every local class without replacement

        Labels are local to the task (0..len(class_ids)-1). The chosen pool
        indices are kept so the caller can exclude them from evaluation.
        """
        if per_class < 1:
            raise ValidationError("per_class must be at least 1", parameter="per_class")
        rng = np.random.default_rng(rng_seed)
        chosen = []
        for local in range(len(class_ids)):
            members = np.flatnonzero(labels == local)
            if members.size < per_class:
                raise ValidationError(
                    f"class {class_ids[local]} has {members.size} test samples, need {per_class}",
                    parameter="per_class"
                )
            chosen.append(np.sort(rng.choice(members, size=per_class, replace=False)))
        indices = np.concatenate(chosen)
        return cls(np.asarray(inputs)[indices], list(class_ids), per_class, indices)


@dataclass
class MixtureRecord(ForwardRecord):
    """Forward record plus each slot's expert output and gate scalar per sample"""
    expert_outputs: List[List[np.ndarray]] = field(default_factory=list)
    gate_values: List[List[np.ndarray]] = field(default_factory=list)


def merged_forward(model: MergedModel, inputs: np.ndarray,
                   head: Optional[PrototypeHead] = None) -> Tuple[np.ndarray, MixtureRecord]:
    """
    Logits of the merged model

    Args:
        model: Merged model
        inputs: N×d_in batch
        head: Head override, typically model.head restricted to a class block

    Returns:
        (logits, record); record.gate_values[l][i] holds gate i's scalar per sample
    """
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.base.input_dim:
        raise CommonErrors.shape_mismatch("inputs", (h.shape[0] if h.ndim else 0, model.base.input_dim), h.shape)
    if head is None:
        head = model.head
    record = MixtureRecord()
    last = len(model.base.layers) - 1
    for l, layer in enumerate(model.base.layers):
        record.layer_inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        outputs, gates = [], []
        for slot in model.slots[l]:
            e = slot.expert.apply(h)
            g = slot.gate(h)
            z = z + g[:, None] * e
            outputs.append(e)
            gates.append(g)
        record.expert_outputs.append(outputs)
        record.gate_values.append(gates)
        record.pre_activations.append(z)
        h = relu(z) if l < last else z
    return cosine_logits(h, head, record), record


def merged_predict(model: MergedModel, inputs: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Local label predictions within one class block"""
    logits, _ = merged_forward(model, inputs, model.head.restrict(class_ids))
    return np.argmax(logits, axis=1)


def kl_rows(logits: np.ndarray, reference_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row KL(p‖q) plus log p and log q"""
    log_p = log_softmax(logits)
    log_q = log_softmax(reference_logits)
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=1), log_p, log_q


def kl_adaptation_loss(model: MergedModel, reference: ModelParams, seed: SeedBuffer) -> float:
    """Mean KL(merged ‖ fine-tuned) over the seed samples, scored on the task's class block"""
    x = seed.inputs
    head = model.head.restrict(seed.class_ids)
    logits, _ = merged_forward(model, x, head)
    reference_logits, _ = forward(reference, head, x)
    rows, _, _ = kl_rows(logits, reference_logits)
    return float(max(rows.mean(), 0.0))


GateGradients = Dict[int, Dict[int, Tuple[np.ndarray, float]]]


def kl_and_gate_gradients(model: MergedModel, reference: ModelParams, inputs: np.ndarray,
                          class_ids: Sequence[int]) -> Tuple[float, GateGradients]:
    """
    KL loss and its exact gradient for every unfrozen gate

    Returns:
        (loss, {task: {layer: (grad_weight, grad_bias)}})
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise CommonErrors.empty_input("batch")
    trainable = model.unfrozen_tasks()
    if not trainable:
        raise ValidationError("no unfrozen gates to differentiate", parameter="model")

    head = model.head.restrict(class_ids)
    logits, record = merged_forward(model, x, head)
    reference_logits, _ = forward(reference, head, x)
    rows, log_p, log_q = kl_rows(logits, reference_logits)
    n = x.shape[0]

    p = np.exp(log_p)
    a = log_p - log_q
    dlogits = p * (a - np.sum(p * a, axis=1, keepdims=True)) / n
    dz = cosine_backward(dlogits, record, head)

    grads: GateGradients = {task: {} for task in trainable}
    for l in range(len(model.base.layers) - 1, -1, -1):
        h = record.layer_inputs[l]
        dh = dz @ model.base.layers[l].weight if l > 0 else None
        for slot, e, g in zip(model.slots[l], record.expert_outputs[l], record.gate_values[l]):
            dg = np.sum(dz * e, axis=1)
            if not slot.gate.frozen:
                grads[slot.task][l] = (h.T @ dg, float(dg.sum()))
            if dh is not None:
                dh += np.outer(dg, slot.gate.weight)
                dh += ((g[:, None] * dz) @ slot.expert.b_factor) @ slot.expert.a_factor
        if dh is not None:
            dz = dh * (record.pre_activations[l - 1] > 0.0)

    return float(rows.mean()), grads


def gate_gradients(model: MergedModel, reference: ModelParams, batch: np.ndarray,
                   class_ids: Sequence[int]) -> GateGradients:
    """Gradients of the KL objective for the unfrozen gates only"""
    return kl_and_gate_gradients(model, reference, batch, class_ids)[1]


def interference(model: MergedModel, inputs: np.ndarray, task: int) -> Dict[int, float]:
    """Mean ‖g_task(x)·f_task(x)‖² the task's gated experts add to each layer on the inputs"""
    _, record = merged_forward(model, inputs)
    result: Dict[int, float] = {}
    for l, layer in enumerate(model.slots):
        for slot, e, g in zip(layer, record.expert_outputs[l], record.gate_values[l]):
            if slot.task == task:
                contribution = g[:, None] * e
                result[l] = float(np.mean(np.sum(contribution ** 2, axis=1)))
    if not result:
        raise ValidationError(f"task {task} has no experts", parameter="task")
    return result


def gate_activation_matrix(model: MergedModel, inputs_by_task: Sequence[np.ndarray],
                           absolute: bool = False) -> np.ndarray:
    """G[i, j]: mean over gated layers and task-j inputs of gate i's scalar (or its magnitude)"""
    num_tasks = model.num_tasks
    matrix = np.zeros((num_tasks, len(inputs_by_task)))
    for j, inputs in enumerate(inputs_by_task):
        _, record = merged_forward(model, inputs)
        per_task: Dict[int, List[float]] = {i: [] for i in range(num_tasks)}
        for l, layer in enumerate(model.slots):
            for slot, g in zip(layer, record.gate_values[l]):
                per_task[slot.task].append(float(np.abs(g).mean() if absolute else g.mean()))
        for i, values in per_task.items():
            matrix[i, j] = float(np.mean(values)) if values else 0.0
    return matrix
