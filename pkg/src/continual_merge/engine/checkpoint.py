"""Merged-model checkpoints: the backbone format plus "head", "experts" and "gates"."""

from typing import Any, Dict, Optional, Tuple

import numpy as np

from ..artifacts import PathLike, read_json, write_json_atomic
from ..errors import ArtifactError
from ..models import PrototypeHead
from ..models.checkpoint import model_from_dict, model_to_dict
from .experts import LowRankExpert
from .mixture import ExpertSlot, GateState, MergedModel


def merged_to_dict(model: MergedModel, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    payload = model_to_dict(model.base, meta)
    payload["head"] = {"prototypes": model.head.prototypes.tolist(), "temperature": model.head.temperature}
    payload["gated_layers"] = list(model.gated_layers)
    payload["experts"] = [
        [{"task": s.task, "b": s.expert.b_factor.tolist(), "a": s.expert.a_factor.tolist(),
          "c": s.expert.bias.tolist()} for s in layer]
        for layer in model.slots
    ]
    payload["gates"] = [
        [{"w": s.gate.weight.tolist(), "b": s.gate.bias, "frozen": s.gate.frozen} for s in layer]
        for layer in model.slots
    ]
    return payload


def merged_from_dict(payload: Dict[str, Any]) -> MergedModel:
    base = model_from_dict(payload)
    try:
        head = PrototypeHead(np.asarray(payload["head"]["prototypes"], dtype=np.float64),
                             float(payload["head"]["temperature"]))
        slots = []
        for experts, gates in zip(payload["experts"], payload["gates"]):
            layer = []
            for e, g in zip(experts, gates):
                expert = LowRankExpert(
                    np.asarray(e["b"], dtype=np.float64).reshape(len(e["b"]), -1),
                    np.asarray(e["a"], dtype=np.float64).reshape(-1, base.layers[len(slots)].weight.shape[1]),
                    np.asarray(e["c"], dtype=np.float64),
                )
                gate = GateState(np.asarray(g["w"], dtype=np.float64), float(g["b"]), bool(g["frozen"]))
                layer.append(ExpertSlot(int(e["task"]), expert, gate))
            slots.append(layer)
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed merged checkpoint: {e}") from e
    if len(slots) != len(base.layers):
        raise ArtifactError("Merged checkpoint needs one expert list per layer")
    return MergedModel(base, head, slots, list(payload.get("gated_layers", [])))


def save_merged(path: PathLike, model: MergedModel, meta: Optional[Dict[str, Any]] = None) -> None:
    write_json_atomic(path, merged_to_dict(model, meta))


def load_merged(path: PathLike) -> Tuple[MergedModel, Dict[str, Any]]:
    payload = read_json(path)
    return merged_from_dict(payload), dict(payload.get("meta", {}))
