"""
Baseline continual mergers

Parameter-space merge rules that fold one fine-tuned model at a time into a
running merged model: SWA, continual task arithmetic, continual Ties, MagMax
and orthogonal-projection merging (OPCM). Biases follow the same rule as the
weights; projection-based rules treat a bias as a one-column matrix.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from ..errors import CommonErrors, ValidationError
from ..linalg import project_against
from ..models import Layer, ModelParams

logger = logging.getLogger(__name__)

BASELINE_METHODS = ("swa", "ta", "ties", "magmax", "opcm")
LAMBDA_RULES = ("sqrt", "linear", "constant")


@dataclass
class TaskVector:
    """Per-layer deltas θ_t − θ₀"""
    layers: List[Layer]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers])

    def unflatten(self, flat: np.ndarray) -> "TaskVector":
        layers, offset = [], 0
        for l in self.layers:
            w = flat[offset:offset + l.weight.size].reshape(l.weight.shape)
            offset += l.weight.size
            b = flat[offset:offset + l.bias.size].reshape(l.bias.shape)
            offset += l.bias.size
            layers.append(Layer(w.copy(), b.copy()))
        return TaskVector(layers)

    def check_compatible(self, other: "TaskVector") -> None:
        mine = [l.weight.shape for l in self.layers]
        theirs = [l.weight.shape for l in other.layers]
        if mine != theirs:
            raise CommonErrors.shape_mismatch("task vector layers", tuple(map(tuple, mine)), tuple(map(tuple, theirs)))

    def zeros_like(self) -> "TaskVector":
        return TaskVector([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers])


@dataclass
class MergeConfig:
    method: str = "ta"
    ta_scale: float = 0.3
    trim_fraction: float = 0.2
    lambda_rule: str = "sqrt"
    accumulated_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in BASELINE_METHODS:
            raise CommonErrors.unknown_tag("method", self.method, BASELINE_METHODS)
        if self.ta_scale <= 0 or self.accumulated_scale <= 0:
            raise ValidationError("merge scales must be positive", parameter="ta_scale")
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ValidationError("trim_fraction must lie in (0, 1]", parameter="trim_fraction")
        if self.lambda_rule not in LAMBDA_RULES:
            raise CommonErrors.unknown_tag("lambda_rule", self.lambda_rule, LAMBDA_RULES)


def task_vector(model: ModelParams, base: ModelParams) -> TaskVector:
    base.check_compatible(model)
    return TaskVector([Layer(m.weight - b.weight, m.bias - b.bias) for m, b in zip(model.layers, base.layers)])


def apply_task_vector(base: ModelParams, delta: TaskVector, scale: float = 1.0) -> ModelParams:
    if [l.weight.shape for l in base.layers] != [l.weight.shape for l in delta.layers]:
        raise CommonErrors.shape_mismatch(
            "task vector vs model",
            tuple(tuple(l.weight.shape) for l in base.layers),
            tuple(tuple(l.weight.shape) for l in delta.layers)
        )
    return ModelParams(
        [Layer(b.weight + scale * d.weight, b.bias + scale * d.bias) for b, d in zip(base.layers, delta.layers)],
        base.activation
    )


def _combine(a: TaskVector, b: TaskVector, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> TaskVector:
    a.check_compatible(b)
    return TaskVector([Layer(fn(x.weight, y.weight), fn(x.bias, y.bias)) for x, y in zip(a.layers, b.layers)])


def lambda_t(t: int, rule: str = "sqrt") -> float:
    """OPCM normalizer λ_t"""
    if t < 1:
        raise ValidationError("t must be at least 1", parameter="t")
    if rule == "sqrt":
        return math.sqrt(t)
    if rule == "linear":
        return float(t)
    if rule == "constant":
        return 1.0
    raise CommonErrors.unknown_tag("lambda_rule", rule, LAMBDA_RULES)


def merge_swa(prev_merged: Optional[ModelParams], new_model: ModelParams, t: int) -> ModelParams:
    """Running average ((t−1)·prev + new)/t"""
    if t < 1:
        raise ValidationError("t must be at least 1", parameter="t")
    if t == 1 or prev_merged is None:
        return new_model.copy()
    return prev_merged.combine(new_model, lambda p, n: ((t - 1) * p + n) / t)


def merge_ta(prev_merged: ModelParams, delta: TaskVector, lam: float) -> ModelParams:
    """Continual task arithmetic: prev + λ·Δθ"""
    return apply_task_vector(prev_merged, delta, lam)


def trim(delta: TaskVector, trim_fraction: float) -> TaskVector:
    """Keep the top trim_fraction entries by magnitude over the whole vector"""
    if not 0.0 < trim_fraction <= 1.0:
        raise ValidationError("trim_fraction must lie in (0, 1]", parameter="trim_fraction")
    flat = delta.flatten()
    keep = int(math.ceil(trim_fraction * flat.size))
    trimmed = np.zeros_like(flat)
    if keep:
        top = np.argsort(-np.abs(flat), kind="stable")[:keep]
        trimmed[top] = flat[top]
    return delta.unflatten(trimmed)


def merge_ties(acc_delta: TaskVector, new_delta: TaskVector, trim_fraction: float) -> TaskVector:
    """
    Ties merge of the accumulated and new deltas

    Both deltas are trimmed, a sign is elected per entry from the sum of the
    trimmed values, and each entry becomes the mean of the values agreeing with
    the elected sign (0 when none agree).
    """
    acc_delta.check_compatible(new_delta)
    stacked = np.stack([trim(acc_delta, trim_fraction).flatten(), trim(new_delta, trim_fraction).flatten()])
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (stacked != 0.0)
    counts = agree.sum(axis=0)
    totals = np.where(agree, stacked, 0.0).sum(axis=0)
    merged = np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)
    return acc_delta.unflatten(merged)


def merge_magmax(acc_delta: TaskVector, new_delta: TaskVector) -> TaskVector:
    """Per entry, the value with the larger magnitude; ties keep the accumulated value"""
    return _combine(acc_delta, new_delta, lambda a, n: np.where(np.abs(n) > np.abs(a), n, a))


def merge_opcm(theta0: ModelParams, prev_merged: ModelParams, new_delta: TaskVector, t: int,
               lambda_rule: str = "sqrt") -> ModelParams:
    """
    Orthogonal-projection continual merge

    θ₀ + (1/λ_t)[λ_{t−1}(prev − θ₀) + P(Δθ_t)], where P removes the diagonal
    singular directions of the accumulated merged delta, layer by layer.
    """
    if t < 1:
        raise ValidationError("t must be at least 1", parameter="t")
    if t == 1:
        return apply_task_vector(theta0, new_delta)

    prev_delta = task_vector(prev_merged, theta0)
    prev_delta.check_compatible(new_delta)
    lam_prev, lam_now = lambda_t(t - 1, lambda_rule), lambda_t(t, lambda_rule)
    layers = []
    for base, prev, new in zip(theta0.layers, prev_delta.layers, new_delta.layers):
        projected_w = project_against(new.weight, prev.weight)
        projected_b = project_against(new.bias.reshape(-1, 1), prev.bias.reshape(-1, 1)).ravel()
        layers.append(Layer(
            base.weight + (lam_prev * prev.weight + projected_w) / lam_now,
            base.bias + (lam_prev * prev.bias + projected_b) / lam_now,
        ))
    return ModelParams(layers, theta0.activation)


class ContinualMerger:
    """
    Drives one baseline through a task sequence

    Each call to step() folds in the next fine-tuned model and returns the
    current merged model.
    """

    def __init__(self, theta0: ModelParams, config: MergeConfig):
        self.theta0 = theta0
        self.config = config
        self.t = 0
        self.merged: Optional[ModelParams] = None
        self.accumulated: Optional[TaskVector] = None

    def step(self, model: ModelParams) -> ModelParams:
        self.t += 1
        cfg = self.config
        delta = task_vector(model, self.theta0)
        prev = self.merged if self.merged is not None else self.theta0

        if cfg.method == "swa":
            self.merged = merge_swa(self.merged, model, self.t)
        elif cfg.method == "ta":
            self.merged = merge_ta(prev, delta, cfg.ta_scale)
        elif cfg.method == "ties":
            acc = self.accumulated if self.accumulated is not None else delta.zeros_like()
            self.accumulated = merge_ties(acc, delta, cfg.trim_fraction) if self.t > 1 else trim(delta, cfg.trim_fraction)
            self.merged = apply_task_vector(self.theta0, self.accumulated, cfg.accumulated_scale)
        elif cfg.method == "magmax":
            acc = self.accumulated if self.accumulated is not None else delta.zeros_like()
            self.accumulated = merge_magmax(acc, delta)
            self.merged = apply_task_vector(self.theta0, self.accumulated, cfg.accumulated_scale)
        else:
            self.merged = merge_opcm(self.theta0, prev, delta, self.t, cfg.lambda_rule)

        logger.debug("%s merged task %d", cfg.method, self.t)
        return self.merged
