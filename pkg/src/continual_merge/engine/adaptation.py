"""
Test-time gate adaptation and the per-task merge procedure

For every incoming task: build low-rank experts from the projected task
vector, attach zero-initialized gates, fit the new gates to the fine-tuned
model's predictions on a handful of unlabeled seed samples, freeze them, and
record the seed activations' dominant directions for later tasks.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..config import RunConfig
from ..errors import CommonErrors, NumericalError, ValidationError
from ..mergers import task_vector
from ..models import ModelParams, PrototypeHead
from ..nullspace import (
    PROJECTION_MODES,
    NullSpaceProjector,
    SubspaceBank,
    TraceRecord,
    augment_bank,
    extract_task_subspace,
)
from .experts import build_expert
from .mixture import MergedModel, SeedBuffer, kl_and_gate_gradients, merged_forward

logger = logging.getLogger(__name__)

GATE_POLICIES = ("newest", "all")


@dataclass
class MingleConfig:
    """Expert, gating and adaptation settings"""
    rank: int = 4
    subspace_k: int = 3
    gamma: float = 1.0
    beta: float = 0.99
    steps: int = 50
    lr: float = 5e-3
    batch_size: int = 16
    seeds_per_class: int = 5
    projection: str = "relaxed"
    trainable_gates: str = "newest"
    fixed_gates: bool = False
    learn_gate_bias: bool = True
    gated_layers: Optional[List[int]] = None

    def __post_init__(self) -> None:
        if self.projection not in PROJECTION_MODES:
            raise CommonErrors.unknown_tag("projection", self.projection, PROJECTION_MODES)
        if self.trainable_gates not in GATE_POLICIES:
            raise CommonErrors.unknown_tag("trainable_gates", self.trainable_gates, GATE_POLICIES)
        if self.steps < 0 or self.lr < 0:
            raise ValidationError("steps and lr must be non-negative", parameter="steps")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1", parameter="batch_size")

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "MingleConfig":
        return cls(
            rank=config.rank,
            subspace_k=config.subspace_k,
            gamma=config.gamma,
            beta=config.beta,
            steps=config.tta_steps,
            lr=config.tta_lr,
            batch_size=config.batch_size,
            seeds_per_class=config.seeds_per_class,
            projection=config.projection,
            trainable_gates=config.trainable_gates,
            fixed_gates=config.fixed_gates,
            learn_gate_bias=config.learn_gate_bias,
            gated_layers=list(config.gated_layers) if config.gated_layers is not None else None,
        )


class Adam:
    """Adam over named parameters; advance() once per optimization step"""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[Tuple, np.ndarray] = {}
        self.v: Dict[Tuple, np.ndarray] = {}

    def advance(self) -> None:
        self.t += 1

    def update(self, key: Tuple, grad: np.ndarray) -> np.ndarray:
        """Step to add to the parameter"""
        g = np.asarray(grad, dtype=np.float64)
        m = self.beta1 * self.m.get(key, np.zeros_like(g)) + (1.0 - self.beta1) * g
        v = self.beta2 * self.v.get(key, np.zeros_like(g)) + (1.0 - self.beta2) * g * g
        self.m[key], self.v[key] = m, v
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def gate_weight_step(optimizer: Adam, key: Tuple, grad: np.ndarray,
                     projector: Optional[NullSpaceProjector], layer: int) -> np.ndarray:
    """
    Constrained Adam step for one gate weight

    Adam runs in the projector's eigenbasis [U, U⊥] and the step is mapped back
    through I − UΛUᵀ. The projector is diagonal there, so the step along u_p is
    exactly (1 − λ_p) times the unconstrained one and the U⊥ part is untouched;
    Λ = I blocks span(U) outright.
    """
    if projector is None or not projector.active or layer not in projector.bank.bases:
        return optimizer.update(key, grad)
    q = projector.rotation(layer)
    return projector.project(layer, q @ optimizer.update(key, q.T @ grad))


def adapt_task(model: MergedModel, reference: ModelParams, seed: SeedBuffer,
               projector: Optional[NullSpaceProjector], config: MingleConfig, rng_seed: int,
               loss_history: Optional[List[float]] = None) -> MergedModel:
    """
    Fit the unfrozen gates to the fine-tuned model on the seed samples

    Args:
        model: Merged model whose newest gates are still unfrozen
        reference: Fine-tuned model of the current task
        seed: Seed buffer of the current task
        projector: Null-space projector for gate-weight updates, None to disable
        config: Adaptation settings
        rng_seed: Minibatch sampling seed
        loss_history: If given, receives the KL loss before every update

    Returns:
        Adapted copy of the model; the input model is left untouched

    Raises:
        NumericalError: If the KL loss becomes non-finite
    """
    adapted = model.copy()
    if not adapted.unfrozen_tasks():
        raise ValidationError("no unfrozen gates to adapt", parameter="model")
    if config.steps == 0 or config.lr == 0:
        return adapted

    rng = np.random.default_rng(rng_seed)
    optimizer = Adam(config.lr)
    newest = max(adapted.unfrozen_tasks())
    n = len(seed)

    for step in range(config.steps):
        if config.batch_size < n:
            idx = np.sort(rng.choice(n, size=config.batch_size, replace=False))
            batch = seed.inputs[idx]
        else:
            batch = seed.inputs
        loss, grads = kl_and_gate_gradients(adapted, reference, batch, seed.class_ids)
        if not np.isfinite(loss):
            raise NumericalError("adaptation loss became non-finite", where="adapt_task", step=step)
        if loss_history is not None:
            loss_history.append(loss)

        optimizer.advance()
        for task, per_layer in grads.items():
            for layer, (grad_w, grad_b) in per_layer.items():
                gate = next(s.gate for s in adapted.slots[layer] if s.task == task)
                if projector is not None and task == newest:
                    projector.observe(layer, grad_w, step)
                gate.weight = gate.weight + gate_weight_step(optimizer, (task, layer, "w"), grad_w, projector, layer)
                if config.learn_gate_bias:
                    gate.bias = float(gate.bias + optimizer.update((task, layer, "b"), np.array(grad_b)))
        logger.debug("adapt step %d kl %.6g", step, loss)

    return adapted


class MingleMerger:
    """
    Continual merger with gated low-rank experts

    Mirrors ContinualMerger's one-model-at-a-time interface, but also needs the
    current task's seed samples.
    """

    def __init__(self, theta0: ModelParams, head: PrototypeHead, config: MingleConfig):
        self.theta0 = theta0
        self.config = config
        gated = config.gated_layers if config.gated_layers else list(range(len(theta0.layers)))
        self.model = MergedModel(theta0.copy(), head, gated_layers=sorted(gated))
        self.bank = SubspaceBank.empty(
            {l: theta0.layers[l].weight.shape[1] for l in self.model.gated_layers}, config.subspace_k
        )
        self.trace: List[TraceRecord] = []
        self.loss_curves: List[List[float]] = []

    @property
    def t(self) -> int:
        return self.model.num_tasks

    def step(self, finetuned: ModelParams, seed: SeedBuffer, rng_seed: int) -> MergedModel:
        cfg = self.config
        first = self.t == 0
        delta = task_vector(finetuned, self.theta0)
        experts = build_expert(
            delta,
            None if first else self.model.expert_sums(),
            cfg.rank,
            is_first_task=first,
            layers=self.model.gated_layers,
        )

        if cfg.fixed_gates:
            self.model.add_task(experts, unit_gates=True)
            logger.debug("merged task %d with constant gates", self.t)
            return self.model

        task = self.model.add_task(experts)
        if cfg.trainable_gates == "all":
            for layer in self.model.slots:
                for slot in layer:
                    slot.gate.frozen = False

        projector = None
        if cfg.projection != "none":
            projector = NullSpaceProjector(self.bank, cfg.projection, cfg.beta, cfg.gamma, task=task)

        losses: List[float] = []
        self.model = adapt_task(self.model, finetuned, seed, projector, cfg, rng_seed, losses)
        self.model.freeze()
        self.loss_curves.append(losses)
        if projector is not None:
            self.trace.extend(projector.trace)

        _, record = merged_forward(self.model, seed.inputs)
        k = min(cfg.subspace_k, len(seed))
        for l in self.model.gated_layers:
            augment_bank(self.bank, l, extract_task_subspace(record.layer_inputs[l], k))

        if losses:
            logger.debug("task %d kl %.4g -> %.4g", task, losses[0], losses[-1])
        return self.model
