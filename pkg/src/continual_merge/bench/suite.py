"""Synthetic continual task suites: Gaussian class clusters in disjoint class blocks."""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ..artifacts import PathLike, read_json, write_json_atomic
from ..config import RunConfig
from ..errors import ArtifactError, ValidationError
from ..models import LabeledBatch

logger = logging.getLogger(__name__)

SUITE_FORMAT = 1


@dataclass
class Task:
    """One task; labels are local to the task's class block"""
    task_id: int
    class_ids: List[int]
    train: LabeledBatch
    test: LabeledBatch
    seed: int


@dataclass
class TaskSuite:
    tasks: List[Task]
    input_dim: int
    classes_per_task: int
    seed: int
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"{self.input_dim}:{self.classes_per_task}:{self.seed}".encode())
        for task in self.tasks:
            digest.update(np.asarray(task.class_ids, dtype=np.int64).tobytes())
            for batch in (task.train, task.test):
                digest.update(np.ascontiguousarray(batch.inputs).tobytes())
                digest.update(batch.labels.astype(np.int64).tobytes())
        return digest.hexdigest()


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    raw = rng.normal(size=(n, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _sample_task(rng: np.random.Generator, classes: int, dim: int, per_class: int,
                 means: np.ndarray, basis: Optional[np.ndarray]) -> LabeledBatch:
    labels = np.repeat(np.arange(classes), per_class)
    latent = means[labels] + rng.normal(size=(labels.size, means.shape[1]))
    inputs = latent if basis is None else latent @ basis.T
    return LabeledBatch(inputs, labels)


def generate_suite(num_tasks: int, classes_per_task: int, input_dim: int, samples_per_class: int,
                   margin: float, seed: int, test_per_class: int = 200, task_spread: float = 6.0,
                   intrinsic_dim: Optional[int] = None) -> TaskSuite:
    """
    Generate a deterministic suite of Gaussian-cluster classification tasks

    Each task has a random center at distance ~task_spread from the origin and
    unit-variance clusters whose means sit margin/2 away from it along random
    unit directions. With intrinsic_dim set, every input of a task lies in a
    random task-specific subspace of that dimension.

    Args:
        num_tasks: Number of tasks T
        classes_per_task: Classes per disjoint block
        input_dim: Input dimension
        samples_per_class: Training samples per class
        margin: Distance scale between class means
        seed: Generator seed
        test_per_class: Test-pool samples per class
        task_spread: Distance scale of task centers
        intrinsic_dim: Optional dimension of each task's input subspace

    Raises:
        ValidationError: For non-positive counts or an oversized intrinsic_dim
    """
    if min(num_tasks, classes_per_task, input_dim, samples_per_class, test_per_class) < 1:
        raise ValidationError("suite counts must be positive", parameter="num_tasks")
    if margin <= 0 or task_spread < 0:
        raise ValidationError("margin must be positive and task_spread non-negative", parameter="margin")
    if intrinsic_dim is not None and not 1 <= intrinsic_dim <= input_dim:
        raise ValidationError("intrinsic_dim must lie in [1, input_dim]", parameter="intrinsic_dim")

    task_seeds = np.random.SeedSequence(seed).generate_state(num_tasks)
    latent_dim = intrinsic_dim or input_dim
    tasks = []
    for t in range(num_tasks):
        rng = np.random.default_rng(int(task_seeds[t]))
        basis = None
        if intrinsic_dim is not None:
            basis, _ = np.linalg.qr(rng.normal(size=(input_dim, intrinsic_dim)))
        center = rng.normal(size=latent_dim) * (task_spread / np.sqrt(latent_dim))
        means = center + 0.5 * margin * _unit_rows(rng, classes_per_task, latent_dim)
        train = _sample_task(rng, classes_per_task, input_dim, samples_per_class, means, basis)
        test = _sample_task(rng, classes_per_task, input_dim, test_per_class, means, basis)
        class_ids = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        tasks.append(Task(t, class_ids, train, test, int(task_seeds[t])))

    params = {
        "num_tasks": num_tasks, "classes_per_task": classes_per_task, "input_dim": input_dim,
        "samples_per_class": samples_per_class, "test_per_class": test_per_class,
        "margin": margin, "task_spread": task_spread, "intrinsic_dim": intrinsic_dim,
    }
    suite = TaskSuite(tasks, input_dim, classes_per_task, seed, params)
    logger.debug("generated suite %s", suite.checksum()[:12])
    return suite


def suite_from_config(config: RunConfig) -> TaskSuite:
    return generate_suite(
        num_tasks=config.num_tasks,
        classes_per_task=config.classes_per_task,
        input_dim=config.input_dim,
        samples_per_class=config.train_per_class,
        margin=config.margin,
        seed=config.suite_seed,
        test_per_class=config.test_per_class,
        task_spread=config.task_spread,
        intrinsic_dim=config.intrinsic_dim,
    )


def suite_to_dict(suite: TaskSuite) -> Dict[str, Any]:
    return {
        "format": SUITE_FORMAT,
        "seed": suite.seed,
        "input_dim": suite.input_dim,
        "classes_per_task": suite.classes_per_task,
        "params": suite.params,
        "checksum": suite.checksum(),
        "tasks": [
            {
                "task_id": task.task_id,
                "class_ids": task.class_ids,
                "seed": task.seed,
                "train": {"x": task.train.inputs.tolist(), "y": task.train.labels.tolist()},
                "test": {"x": task.test.inputs.tolist(), "y": task.test.labels.tolist()},
            }
            for task in suite.tasks
        ],
    }


def suite_from_dict(payload: Dict[str, Any]) -> TaskSuite:
    try:
        tasks = [
            Task(
                int(entry["task_id"]),
                [int(c) for c in entry["class_ids"]],
                LabeledBatch(np.asarray(entry["train"]["x"], dtype=np.float64), np.asarray(entry["train"]["y"])),
                LabeledBatch(np.asarray(entry["test"]["x"], dtype=np.float64), np.asarray(entry["test"]["y"])),
                int(entry["seed"]),
            )
            for entry in payload["tasks"]
        ]
        suite = TaskSuite(tasks, int(payload["input_dim"]), int(payload["classes_per_task"]),
                          int(payload["seed"]), dict(payload.get("params", {})))
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed suite file: {e}") from e
    expected = payload.get("checksum")
    if expected is not None and expected != suite.checksum():
        raise ArtifactError("Suite checksum mismatch; the file was modified or truncated")
    return suite


def save_suite(path: PathLike, suite: TaskSuite) -> None:
    write_json_atomic(path, suite_to_dict(suite))


def load_suite(path: PathLike) -> TaskSuite:
    return suite_from_dict(read_json(path))
