"""JSON checkpoints: {"layers": [{"w": [[...]], "b": [...]}], "meta": {...}}"""

from typing import Any, Dict, Optional, Tuple

import numpy as np

from ..artifacts import PathLike, read_json, write_json_atomic
from ..errors import ArtifactError
from . import Layer, ModelParams


def model_to_dict(model: ModelParams, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "layers": [{"w": layer.weight.tolist(), "b": layer.bias.tolist()} for layer in model.layers],
        "activation": model.activation,
        "meta": dict(meta or {}),
    }


def model_from_dict(payload: Dict[str, Any]) -> ModelParams:
    try:
        layers = [
            Layer(np.asarray(entry["w"], dtype=np.float64), np.asarray(entry["b"], dtype=np.float64))
            for entry in payload["layers"]
        ]
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"Malformed checkpoint: {e}") from e
    return ModelParams(layers, payload.get("activation", "relu"))


def save_checkpoint(path: PathLike, model: ModelParams, meta: Optional[Dict[str, Any]] = None) -> None:
    """Write a checkpoint; meta typically carries seed, task_id and steps"""
    write_json_atomic(path, model_to_dict(model, meta))


def load_checkpoint(path: PathLike) -> Tuple[ModelParams, Dict[str, Any]]:
    payload = read_json(path)
    return model_from_dict(payload), dict(payload.get("meta", {}))
