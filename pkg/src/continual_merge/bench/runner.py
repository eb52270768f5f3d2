"""
Continual merge-adapt-evaluate loop

One run fine-tunes every task model from the shared initialization, merges
them one at a time in a given order and scores the merged model on every task
seen so far after each merge.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..config import METHODS, RunConfig
from ..engine import MingleConfig, MingleMerger, SeedBuffer, merged_predict
from ..errors import CommonErrors, ValidationError
from ..mergers import ContinualMerger, MergeConfig
from ..models import ModelParams, PrototypeHead, finetune, forward, init_model, make_head
from ..nullspace import trace_rows
from .metrics import AccuracyMatrix, accuracy_trend, compute_metrics
from .suite import Task, TaskSuite

logger = logging.getLogger(__name__)


@dataclass
class RunReport:
    """Outcome of one (method, order, seed) run; ACC and BWT follow from the matrix"""
    method: str
    order: List[int]
    seed: int
    matrix: AccuracyMatrix
    acc: float
    bwt: float
    trend: List[float] = field(default_factory=list)
    noise_sigma: float = 0.0
    suite_checksum: str = ""
    expert_checksums: Optional[List[List[str]]] = None
    config: Dict[str, Any] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def num_tasks(self) -> int:
        return self.matrix.num_tasks

    def is_consistent(self, tol: float = 1e-12) -> bool:
        acc, bwt = compute_metrics(self.matrix)
        return abs(acc - self.acc) <= tol and abs(bwt - self.bwt) <= tol

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        """Wall time is left out by default so reruns serialize identically"""
        payload: Dict[str, Any] = {
            "method": self.method,
            "order": list(self.order),
            "seed": self.seed,
            "matrix": self.matrix.to_list(),
            "acc": self.acc,
            "bwt": self.bwt,
            "trend": list(self.trend),
            "noise_sigma": self.noise_sigma,
            "suite_checksum": self.suite_checksum,
            "expert_checksums": self.expert_checksums,
            "config": self.config,
        }
        if include_timing:
            payload["wall_time"] = self.wall_time
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunReport":
        return cls(
            method=payload["method"],
            order=[int(i) for i in payload["order"]],
            seed=int(payload["seed"]),
            matrix=AccuracyMatrix.from_list(payload["matrix"]),
            acc=float(payload["acc"]),
            bwt=float(payload["bwt"]),
            trend=[float(v) for v in payload.get("trend", [])],
            noise_sigma=float(payload.get("noise_sigma", 0.0)),
            suite_checksum=payload.get("suite_checksum", ""),
            expert_checksums=payload.get("expert_checksums"),
            config=dict(payload.get("config", {})),
            wall_time=float(payload.get("wall_time", 0.0)),
        )


def check_order(order: Sequence[int], num_tasks: int) -> List[int]:
    order = [int(i) for i in order]
    if sorted(order) != list(range(num_tasks)):
        raise ValidationError(f"order {order} is not a permutation of 0..{num_tasks - 1}", parameter="order")
    return order


class ContinualRun:
    """
    State of one continual run

    After execute() the final merged model stays available for corruption_eval
    and for gate diagnostics.
    """

    def __init__(self, suite: TaskSuite, method: str, config: RunConfig, order: Sequence[int], seed: int):
        if method not in METHODS:
            raise CommonErrors.unknown_tag("method", method, METHODS)
        self.suite = suite
        self.method = method
        self.config = config
        self.order = check_order(order, suite.num_tasks)
        self.seed = seed
        self.theta0: ModelParams = init_model(
            [suite.input_dim] + config.layer_sizes[1:], seed=suite.seed
        )
        self.head: PrototypeHead = make_head(
            suite.num_classes, config.hidden_width, config.temperature, seed=suite.seed + 1
        )
        self.seed_buffers: Dict[int, SeedBuffer] = {
            task.task_id: SeedBuffer.draw(
                task.test.inputs, task.test.labels, task.class_ids, config.seeds_per_class,
                rng_seed=seed * 10007 + task.task_id,
            )
            for task in suite.tasks
        }
        self.finetuned: Dict[int, ModelParams] = {}
        self.merged: Optional[ModelParams] = None
        self.mingle: Optional[MingleMerger] = None
        self.report: Optional[RunReport] = None

    def _finetune(self, task: Task, start: ModelParams) -> ModelParams:
        head = self.head.restrict(task.class_ids)
        return finetune(start, head, task.train, self.config.finetune_steps, self.config.finetune_lr,
                        rng_seed=task.seed)

    def eval_mask(self, task_id: int) -> np.ndarray:
        """Test-pool rows used for scoring; the run's seed samples are excluded"""
        task = self.suite.tasks[task_id]
        mask = np.ones(len(task.test), dtype=bool)
        mask[self.seed_buffers[task_id].pool_indices] = False
        return mask

    def evaluate(self, task_id: int, noise_sigma: float = 0.0) -> float:
        task = self.suite.tasks[task_id]
        mask = self.eval_mask(task_id)
        inputs = task.test.inputs[mask]
        labels = task.test.labels[mask]
        if noise_sigma > 0:
            rng = np.random.default_rng([self.seed, task_id])
            inputs = inputs + noise_sigma * rng.normal(size=inputs.shape)
        if self.method == "mingle":
            assert self.mingle is not None
            predictions = merged_predict(self.mingle.model, inputs, task.class_ids)
        else:
            assert self.merged is not None
            logits, _ = forward(self.merged, self.head.restrict(task.class_ids), inputs)
            predictions = np.argmax(logits, axis=1)
        return float(np.mean(predictions == labels))

    def execute(self) -> RunReport:
        cfg = self.config
        started = time.perf_counter()
        matrix = AccuracyMatrix(self.suite.num_tasks)
        baseline = None
        if self.method == "mingle":
            self.mingle = MingleMerger(self.theta0, self.head, MingleConfig.from_run_config(cfg))
        else:
            baseline = ContinualMerger(self.theta0, MergeConfig(
                method=self.method,
                ta_scale=cfg.ta_scale,
                trim_fraction=cfg.trim_fraction,
                lambda_rule=cfg.lambda_rule,
                accumulated_scale=cfg.accumulated_scale,
            ))

        previous = self.theta0
        for t, task_id in enumerate(self.order):
            task = self.suite.tasks[task_id]
            start = previous if cfg.finetune_mode == "sequential" else self.theta0
            model = self._finetune(task, start)
            self.finetuned[task_id] = model
            previous = model

            if self.mingle is not None:
                self.mingle.step(model, self.seed_buffers[task_id], rng_seed=self.seed * 10007 + 5003 + t)
            else:
                assert baseline is not None
                self.merged = baseline.step(model)

            for i, seen in enumerate(self.order[: t + 1]):
                matrix.record(t, i, self.evaluate(seen))
            logger.info("%s seed %d: merged task %d (%d/%d), mean acc %.3f",
                        self.method, self.seed, task_id, t + 1, len(self.order), float(np.mean(matrix.row(t))))

        acc, bwt = compute_metrics(matrix)
        self.report = RunReport(
            method=self.method,
            order=list(self.order),
            seed=self.seed,
            matrix=matrix,
            acc=acc,
            bwt=bwt,
            trend=accuracy_trend(matrix),
            suite_checksum=self.suite.checksum(),
            expert_checksums=self.mingle.model.expert_checksums() if self.mingle else None,
            config=cfg.provenance(),
            wall_time=time.perf_counter() - started,
        )
        return self.report

    def trace(self) -> List[Dict[str, float]]:
        return trace_rows(self.mingle.trace) if self.mingle is not None else []


def run_continual(suite: TaskSuite, method: str, config: RunConfig, order: Sequence[int],
                  seed: int) -> RunReport:
    return ContinualRun(suite, method, config, order, seed).execute()


def corruption_eval(run: ContinualRun, noise_sigma: float) -> RunReport:
    """
    Re-score the final merged model under N(0, σ²) input noise

    The final row of the accuracy matrix is replaced by the noisy accuracies;
    earlier rows keep their clean values, so σ = 0 reproduces the clean report.
    """
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be non-negative", parameter="noise_sigma")
    if run.report is None:
        raise ValidationError("run has not been executed", parameter="run")
    clean = run.report
    t = clean.num_tasks - 1
    matrix = AccuracyMatrix(clean.num_tasks)
    for row in range(t):
        for i in range(row + 1):
            matrix.record(row, i, float(clean.matrix.values[row, i]))
    for i, task_id in enumerate(run.order):
        matrix.record(t, i, run.evaluate(task_id, noise_sigma))
    acc, bwt = compute_metrics(matrix)
    return RunReport(
        method=clean.method,
        order=list(clean.order),
        seed=clean.seed,
        matrix=matrix,
        acc=acc,
        bwt=bwt,
        trend=accuracy_trend(matrix),
        noise_sigma=float(noise_sigma),
        suite_checksum=clean.suite_checksum,
        expert_checksums=clean.expert_checksums,
        config=clean.config,
    )
