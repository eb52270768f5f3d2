"""
Model zoo

A small relu feed-forward backbone with a scaled-cosine prototype head, exact
reverse-mode gradients of the cross-entropy loss and the plain gradient-descent
fine-tuning loop that turns the shared initialization into per-task models.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import CommonErrors, NumericalError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu",)


@dataclass
class Layer:
    """One affine map: weight d_out×d_in and bias d_out"""
    weight: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape  # type: ignore[return-value]

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy())


@dataclass
class ModelParams:
    """Layer stack of the backbone; relu between layers, none after the last"""
    layers: List[Layer]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise CommonErrors.unknown_tag("activation", self.activation, ACTIVATIONS)
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeMismatchError(
                    f"layer {i}: bias does not match weight rows",
                    expected=(layer.weight.shape[0],),
                    actual=layer.bias.shape
                )
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeMismatchError(
                    f"layer {i} input does not chain with layer {i - 1} output",
                    expected=(self.layers[i - 1].weight.shape[0],),
                    actual=(layer.weight.shape[1],)
                )

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].weight.shape[1]] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[1])

    def copy(self) -> "ModelParams":
        return ModelParams([layer.copy() for layer in self.layers], self.activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in self.layers)

    def check_compatible(self, other: "ModelParams") -> None:
        if self.layer_sizes != other.layer_sizes:
            raise ShapeMismatchError(
                "models have different layer sizes",
                expected=tuple(self.layer_sizes),
                actual=tuple(other.layer_sizes)
            )

    def combine(self, other: "ModelParams",
                fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ModelParams":
        """Apply fn to matching weight and bias arrays"""
        self.check_compatible(other)
        return ModelParams(
            [Layer(fn(a.weight, b.weight), fn(a.bias, b.bias)) for a, b in zip(self.layers, other.layers)],
            self.activation
        )


@dataclass(frozen=True)
class PrototypeHead:
    """Frozen unit-norm class prototypes with cosine temperature τ"""
    prototypes: np.ndarray
    temperature: float = 20.0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive", parameter="temperature")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-10):
            raise ValidationError("prototype rows must have unit norm", parameter="prototypes")

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[1])

    def restrict(self, class_ids: Sequence[int]) -> "PrototypeHead":
        """Head over a class block; labels are re-indexed 0..len(class_ids)-1"""
        return PrototypeHead(self.prototypes[np.asarray(class_ids, dtype=int)], self.temperature)


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ShapeMismatchError(
                "labels must match the number of input rows",
                expected=(self.inputs.shape[0],),
                actual=self.labels.shape
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class ForwardRecord:
    """Per-layer inputs and pre-activations plus the normalized feature"""
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    features: Optional[np.ndarray] = None
    feature_norms: Optional[np.ndarray] = None
    normalized: Optional[np.ndarray] = None


def init_model(layer_sizes: Sequence[int], seed: int, activation: str = "relu") -> ModelParams:
    """He-normal weights and zero biases: the shared initialization θ₀"""
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ValidationError("layer_sizes needs at least two positive sizes", parameter="layer_sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weight = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        layers.append(Layer(weight, np.zeros(d_out)))
    return ModelParams(layers, activation)


def make_head(num_classes: int, dim: int, temperature: float = 20.0, seed: int = 0) -> PrototypeHead:
    """Random unit prototypes, one per class of the combined label space"""
    if num_classes < 1 or dim < 1:
        raise ValidationError("num_classes and dim must be positive", parameter="num_classes")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(num_classes, dim))
    return PrototypeHead(raw / np.linalg.norm(raw, axis=1, keepdims=True), temperature)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cosine_logits(features: np.ndarray, head: PrototypeHead, record: Optional[ForwardRecord] = None) -> np.ndarray:
    """τ · cos(feature, prototype); normalize(0) is defined as 0"""
    if features.shape[1] != head.dim:
        raise CommonErrors.shape_mismatch("feature dimension", (head.dim,), (features.shape[1],))
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    normalized = features / safe[:, None]
    normalized[norms == 0.0] = 0.0
    if record is not None:
        record.features = features
        record.feature_norms = norms
        record.normalized = normalized
    return head.temperature * normalized @ head.prototypes.T


def cosine_backward(dlogits: np.ndarray, record: ForwardRecord, head: PrototypeHead) -> np.ndarray:
    """Gradient with respect to the raw features given the gradient of the logits"""
    assert record.normalized is not None and record.feature_norms is not None
    dnormalized = head.temperature * dlogits @ head.prototypes
    n = record.normalized
    norms = record.feature_norms
    radial = np.sum(n * dnormalized, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    dfeatures = (dnormalized - n * radial) / safe[:, None]
    dfeatures[norms == 0.0] = 0.0
    return dfeatures


def _check_inputs(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise CommonErrors.shape_mismatch("inputs", (x.shape[0] if x.ndim else 0, model.input_dim), x.shape)
    return x


def forward(model: ModelParams, head: PrototypeHead, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardRecord]:
    """
    Scaled-cosine logits of the backbone

    Returns:
        (logits N×|C|, record of every layer's input and pre-activation)
    """
    h = _check_inputs(model, inputs)
    record = ForwardRecord()
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        record.layer_inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        record.pre_activations.append(z)
        h = relu(z) if i < last else z
    return cosine_logits(h, head, record), record


def backward_layers(model: ModelParams, record: ForwardRecord,
                    dfeatures: np.ndarray) -> ModelParams:
    """Weight and bias gradients of the plain backbone"""
    grads: List[Layer] = []
    dz = dfeatures
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        h = record.layer_inputs[i]
        grads.append(Layer(dz.T @ h, dz.sum(axis=0)))
        if i > 0:
            dh = dz @ layer.weight
            dz = dh * (record.pre_activations[i - 1] > 0.0)
    grads.reverse()
    return ModelParams(grads, model.activation)


def cross_entropy_and_grads(model: ModelParams, head: PrototypeHead,
                            data: LabeledBatch) -> Tuple[float, ModelParams]:
    """
    Mean cross-entropy loss and its exact gradient

    Raises:
        ValidationError: For an empty batch or labels outside the head
    """
    if len(data) == 0:
        raise CommonErrors.empty_input("batch")
    if data.labels.min() < 0 or data.labels.max() >= head.num_classes:
        raise ValidationError("labels outside the head's classes", parameter="labels")
    logits, record = forward(model, head, data.inputs)
    n = len(data)
    log_probs = log_softmax(logits)
    loss = float(-log_probs[np.arange(n), data.labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), data.labels] -= 1.0
    dlogits /= n
    dfeatures = cosine_backward(dlogits, record, head)
    return loss, backward_layers(model, record, dfeatures)


def predict(model: ModelParams, head: PrototypeHead, inputs: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, head, inputs)
    return np.argmax(logits, axis=1)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        raise CommonErrors.empty_input("labels")
    return float(np.mean(predictions == labels))


def finetune(init: ModelParams, head: PrototypeHead, data: LabeledBatch, steps: int, lr: float,
             rng_seed: int, batch_size: Optional[int] = None,
             loss_history: Optional[List[float]] = None) -> ModelParams:
    """
    Plain gradient descent on the cross-entropy loss; the head stays frozen

    Args:
        init: Starting parameters (left untouched)
        head: Prototype head restricted to the task's classes
        data: Training batch
        steps: Number of updates, at least 1
        lr: Learning rate
        rng_seed: Seed for minibatch sampling when batch_size is set
        batch_size: Minibatch size; None means full-batch descent
        loss_history: If given, receives the loss seen at every step

    Raises:
        NumericalError: If the loss becomes non-finite
    """
    if steps < 1:
        raise ValidationError("steps must be at least 1", parameter="steps")
    if lr < 0:
        raise ValidationError("lr must be non-negative", parameter="lr")
    rng = np.random.default_rng(rng_seed)
    params = init.copy()

    for step in range(steps):
        batch = data
        if batch_size is not None and batch_size < len(data):
            idx = rng.choice(len(data), size=batch_size, replace=False)
            batch = LabeledBatch(data.inputs[idx], data.labels[idx])
        loss, grads = cross_entropy_and_grads(params, head, batch)
        if not np.isfinite(loss):
            raise NumericalError("fine-tuning loss became non-finite", where="finetune", step=step)
        if loss_history is not None:
            loss_history.append(loss)
        if lr:
            for layer, grad in zip(params.layers, grads.layers):
                layer.weight -= lr * grad.weight
                layer.bias -= lr * grad.bias
        logger.debug("finetune step %d loss %.6f", step, loss)

    if not params.is_finite():
        raise NumericalError("fine-tuned parameters are non-finite", where="finetune")
    return params
