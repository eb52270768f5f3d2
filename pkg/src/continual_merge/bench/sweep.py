"""
Order sweeps, aggregate tables, the ablation grid and the γ study

Runs are independent, so they fan out over joblib workers; results are
sorted by (method, seed) before anything is aggregated or written, which
keeps every output independent of the worker count.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..config import METHODS, RunConfig
from ..engine import gate_activation_matrix
from ..errors import ValidationError
from .runner import ContinualRun, RunReport, corruption_eval
from .suite import TaskSuite

logger = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ["method", "T", "ACC_mean", "ACC_std", "BWT_mean", "BWT_std"]
DEFAULT_GAMMAS = (4.0, 1.0, 0.25)


@dataclass(frozen=True)
class AblationRow:
    name: str
    overrides: Dict[str, object]


ABLATION_ROWS: Tuple[AblationRow, ...] = (
    AblationRow("no-tta fixed gates", {"fixed_gates": True, "projection": "none"}),
    AblationRow("tta unfrozen old gates", {"trainable_gates": "all", "projection": "none"}),
    AblationRow("tta frozen old gates", {"trainable_gates": "newest", "projection": "none"}),
    AblationRow("+ hard constraint", {"trainable_gates": "newest", "projection": "hard"}),
    AblationRow("+ relaxation", {"trainable_gates": "newest", "projection": "relaxed"}),
)


def order_permutations(num_tasks: int, orders: int, base_seed: int) -> List[Tuple[int, List[int]]]:
    """
    (seed, order) pairs for seeds base_seed, base_seed+1, ...

    Each order is drawn from its seed's generator; repeats of an earlier order
    are redrawn from the same generator while unused permutations remain.
    """
    if orders < 1:
        raise ValidationError("orders must be at least 1", parameter="orders")
    seen = set()
    pairs = []
    for n in range(orders):
        seed = base_seed + n
        rng = np.random.default_rng(seed)
        order = [int(i) for i in rng.permutation(num_tasks)]
        while tuple(order) in seen and len(seen) < math.factorial(num_tasks):
            order = [int(i) for i in rng.permutation(num_tasks)]
        seen.add(tuple(order))
        pairs.append((seed, order))
    return pairs


def _run_one(suite: TaskSuite, method: str, config: RunConfig, order: List[int], seed: int,
             noise_sigmas: Sequence[float]) -> Tuple[RunReport, List[RunReport], List[Dict[str, float]]]:
    run = ContinualRun(suite, method, config, order, seed)
    report = run.execute()
    noisy = [corruption_eval(run, sigma) for sigma in noise_sigmas]
    return report, noisy, run.trace()


@dataclass
class SweepResult:
    reports: List[RunReport]
    noisy: List[RunReport]
    traces: Dict[Tuple[str, int], List[Dict[str, float]]]

    def aggregate(self) -> pd.DataFrame:
        return aggregate(self.reports)


def sweep(suite: TaskSuite, config: RunConfig, methods: Optional[Sequence[str]] = None,
          n_jobs: Optional[int] = None) -> SweepResult:
    """Every method over config.orders task orders"""
    methods = list(methods or config.methods)
    pairs = order_permutations(suite.num_tasks, config.orders, config.base_seed)
    jobs = [(method, seed, order) for method in methods for seed, order in pairs]
    logger.info("sweeping %d runs over %d worker(s)", len(jobs), n_jobs or config.jobs)
    outputs = Parallel(n_jobs=n_jobs or config.jobs)(
        delayed(_run_one)(suite, method, config, order, seed, config.noise_sigmas)
        for method, seed, order in jobs
    )
    rank = {m: i for i, m in enumerate(METHODS)}
    ordered = sorted(zip(jobs, outputs), key=lambda item: (rank[item[0][0]], item[0][1]))
    return SweepResult(
        reports=[out[0] for _, out in ordered],
        noisy=[r for _, out in ordered for r in out[1]],
        traces={(job[0], job[1]): out[2] for job, out in ordered},
    )


def aggregate(reports: Sequence[RunReport], by: str = "method") -> pd.DataFrame:
    """Mean and population std of ACC and BWT per method"""
    if not reports:
        return pd.DataFrame(columns=AGGREGATE_COLUMNS)
    frame = pd.DataFrame(
        [{"method": r.method, "T": r.num_tasks, "ACC": r.acc, "BWT": r.bwt, "noise_sigma": r.noise_sigma}
         for r in reports]
    )
    keys = [by, "T"] if by == "method" else [by, "method", "T"]
    grouped = frame.groupby(keys, sort=False)
    table = pd.DataFrame({
        "ACC_mean": grouped["ACC"].mean(),
        "ACC_std": grouped["ACC"].std(ddof=0),
        "BWT_mean": grouped["BWT"].mean(),
        "BWT_std": grouped["BWT"].std(ddof=0),
    }).reset_index()
    return table


def aggregate_csv(table: pd.DataFrame) -> str:
    return table.to_csv(index=False, float_format="%.10g", lineterminator="\n")


def run_ablation(suite: TaskSuite, config: RunConfig, n_jobs: Optional[int] = None) -> pd.DataFrame:
    """
    MINGLE under each ablation row, averaged over config.orders orders

    Returns:
        Frame with columns row, T, ACC_mean, ACC_std, BWT_mean, BWT_std
    """
    pairs = order_permutations(suite.num_tasks, config.orders, config.base_seed)
    jobs = []
    for row in ABLATION_ROWS:
        row_config = config.with_overrides(**row.overrides)
        jobs.extend((row.name, row_config, seed, order) for seed, order in pairs)
    logger.info("ablation: %d rows x %d orders", len(ABLATION_ROWS), len(pairs))
    outputs = Parallel(n_jobs=n_jobs or config.jobs)(
        delayed(_run_one)(suite, "mingle", row_config, order, seed, ())
        for _, row_config, seed, order in jobs
    )
    frame = pd.DataFrame([
        {"row": name, "T": out[0].num_tasks, "ACC": out[0].acc, "BWT": out[0].bwt}
        for (name, _, _, _), out in zip(jobs, outputs)
    ])
    grouped = frame.groupby(["row", "T"], sort=False)
    return pd.DataFrame({
        "ACC_mean": grouped["ACC"].mean(),
        "ACC_std": grouped["ACC"].std(ddof=0),
        "BWT_mean": grouped["BWT"].mean(),
        "BWT_std": grouped["BWT"].std(ddof=0),
    }).reset_index()


def prior_gate_activation(run: ContinualRun) -> float:
    """Mean |gate| of each task's gates on the test inputs of tasks merged before it"""
    assert run.mingle is not None
    inputs = [run.suite.tasks[task_id].test.inputs[run.eval_mask(task_id)] for task_id in run.order]
    g = gate_activation_matrix(run.mingle.model, inputs, absolute=True)
    prior = [g[i, j] for i in range(g.shape[0]) for j in range(i)]
    return float(np.mean(prior)) if prior else 0.0


def _gamma_point(suite: TaskSuite, config: RunConfig, order: List[int], seed: int) -> float:
    run = ContinualRun(suite, "mingle", config, order, seed)
    run.execute()
    return prior_gate_activation(run)


def gamma_study(suite: TaskSuite, config: RunConfig, gammas: Sequence[float] = DEFAULT_GAMMAS,
                n_jobs: Optional[int] = None) -> pd.DataFrame:
    """Mean prior-task gate activation per shrinkage strength γ under relaxed projection"""
    pairs = order_permutations(suite.num_tasks, config.orders, config.base_seed)
    jobs = [(gamma, config.with_overrides(gamma=gamma, projection="relaxed"), seed, order)
            for gamma in gammas for seed, order in pairs]
    values = Parallel(n_jobs=n_jobs or config.jobs)(
        delayed(_gamma_point)(suite, cfg, order, seed) for _, cfg, seed, order in jobs
    )
    frame = pd.DataFrame([{"gamma": gamma, "activation": v} for (gamma, _, _, _), v in zip(jobs, values)])
    return frame.groupby("gamma", sort=False)["activation"].mean().reset_index()
