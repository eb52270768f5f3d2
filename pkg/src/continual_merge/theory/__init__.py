"""
Routing risk lab

Closed-form and simulated risk of a hard-routed mixture of task experts, the
best static mixture of the same experts, and the check deciding when routing
noise still leaves the mixture ahead. Discrete task worlds make every
quantity exactly enumerable.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

STATIC_RULES = ("expected", "vote")
MAX_GRID_TASKS = 3
MC_CHUNK = 65536
_PRIOR_TOL = 1e-12


class RiskSpec(BaseModel):
    """Task priors P(t), risks R[t][i] of expert i on task t, routing error rates ε_t"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    priors: List[float] = Field(min_length=1)
    risk_matrix: List[List[float]]
    routing_errors: List[float]

    @model_validator(mode="after")
    def _consistent(self) -> "RiskSpec":
        t = len(self.priors)
        if any(p < 0 for p in self.priors):
            raise ValueError("priors must be non-negative")
        if abs(math.fsum(self.priors) - 1.0) > _PRIOR_TOL:
            raise ValueError(f"priors must sum to 1, got {math.fsum(self.priors)!r}")
        if len(self.risk_matrix) != t or any(len(row) != t for row in self.risk_matrix):
            raise ValueError(f"risk_matrix must be {t}x{t}")
        if any(not 0.0 <= r <= 1.0 for row in self.risk_matrix for r in row):
            raise ValueError("risks must lie in [0, 1]")
        if len(self.routing_errors) != t:
            raise ValueError(f"routing_errors must have {t} entries")
        if any(not 0.0 <= e <= 1.0 for e in self.routing_errors):
            raise ValueError("routing errors must lie in [0, 1]")
        return self

    @property
    def num_tasks(self) -> int:
        return len(self.priors)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.priors, dtype=np.float64)

    @property
    def r(self) -> np.ndarray:
        return np.asarray(self.risk_matrix, dtype=np.float64)

    @property
    def eps(self) -> np.ndarray:
        return np.asarray(self.routing_errors, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DiscreteTaskWorld:
    """
    Finite task domains with labels and every expert's decision table

    Task t is uniform over its points; predictions[i][t][j] is expert i's label
    for point j of task t. There is one expert per task.
    """
    labels: Tuple[np.ndarray, ...]
    predictions: Tuple[Tuple[np.ndarray, ...], ...]
    num_classes: int

    def __post_init__(self) -> None:
        t = len(self.labels)
        if t < 1:
            raise ValidationError("a world needs at least one task", parameter="labels")
        if len(self.predictions) != t or any(len(tables) != t for tables in self.predictions):
            raise ValidationError("need one decision table per (expert, task)", parameter="predictions")
        for tables in self.predictions:
            for table, labels in zip(tables, self.labels):
                if table.shape != labels.shape or labels.size == 0:
                    raise ValidationError("decision tables must cover every task point", parameter="predictions")

    @property
    def num_tasks(self) -> int:
        return len(self.labels)

    def correct(self, expert: int, task: int) -> np.ndarray:
        return self.predictions[expert][task] == self.labels[task]

    def risk_matrix(self) -> np.ndarray:
        """R[t][i]: 0-1 risk of expert i on task t"""
        t = self.num_tasks
        return np.array([[1.0 - self.correct(i, task).mean() for i in range(t)] for task in range(t)])


def _wrong_risk(r: np.ndarray) -> np.ndarray:
    t = r.shape[0]
    off_diag = r.sum(axis=1) - np.diag(r)
    return off_diag / (t - 1)


def ideal_risk(spec: RiskSpec) -> float:
    """Risk under perfect routing: Σ P(t)·R_t(t)"""
    p, r = spec.p, spec.r
    total = 0.0
    for t in range(spec.num_tasks):
        total += p[t] * r[t, t]
    return float(total)


def routing_penalty(spec: RiskSpec) -> float:
    """Σ P(t)·ε_t·(R_wrong,t − R_t(t))"""
    if spec.num_tasks < 2:
        raise ValidationError("misrouting needs at least two tasks", parameter="priors")
    r = spec.r
    return float(np.dot(spec.p * spec.eps, _wrong_risk(r) - np.diag(r)))


def moe_risk_closed_form(spec: RiskSpec) -> float:
    """R_ideal plus the routing penalty; wrong experts are chosen uniformly"""
    return ideal_risk(spec) + routing_penalty(spec)


def _mc_chunk(r_row: np.ndarray, task: int, eps: float, size: int, seed: int, chunk: int) -> Tuple[float, float]:
    """Sum and sum of squares of R_t(chosen) − R_t(t) over one chunk of draws"""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(task, chunk))))
    t = r_row.shape[0]
    wrong = rng.random(size) < eps
    # uniform over the t−1 wrong experts: skip over the correct index
    pick = rng.integers(0, t - 1, size=size)
    pick = pick + (pick >= task)
    diff = np.where(wrong, r_row[pick] - r_row[task], 0.0)
    return float(diff.sum()), float(np.dot(diff, diff))


def moe_risk_monte_carlo(spec: RiskSpec, n_draws: int, rng_seed: int, n_jobs: int = 1) -> Tuple[float, float]:
    """
    Simulated risk of the noisily routed mixture

    Every task receives n_draws routing draws in fixed-size chunks, each chunk
    with its own counter-based stream, so the estimate does not depend on
    n_jobs. Accrued losses are the per-(task, expert) risks.

    Returns:
        (estimate, standard error)
    """
    if n_draws < 1:
        raise ValidationError("n_draws must be at least 1", parameter="n_draws")
    if spec.num_tasks < 2:
        raise ValidationError("misrouting needs at least two tasks", parameter="priors")
    r, eps, p = spec.r, spec.eps, spec.p
    sizes = [MC_CHUNK] * (n_draws // MC_CHUNK) + ([n_draws % MC_CHUNK] if n_draws % MC_CHUNK else [])
    jobs = [(task, c, size) for task in range(spec.num_tasks) for c, size in enumerate(sizes)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_mc_chunk)(r[task], task, float(eps[task]), size, rng_seed, c) for task, c, size in jobs
    )

    estimate, variance = 0.0, 0.0
    for task in range(spec.num_tasks):
        parts = [res for (t, _, _), res in zip(jobs, results) if t == task]
        total = math.fsum(s for s, _ in parts)
        total_sq = math.fsum(q for _, q in parts)
        mean = total / n_draws
        var = max(total_sq / n_draws - mean * mean, 0.0)
        estimate += p[task] * (r[task, task] + mean)
        variance += p[task] ** 2 * var / n_draws
    return float(estimate), float(math.sqrt(variance))


def enumerated_moe_risk(world: DiscreteTaskWorld, priors: Sequence[float],
                        routing_errors: Sequence[float]) -> float:
    """Exact risk of the routed mixture, enumerating every point and routing outcome"""
    t = world.num_tasks
    if t < 2:
        raise ValidationError("misrouting needs at least two tasks", parameter="priors")
    total = 0.0
    for task in range(t):
        eps = float(routing_errors[task])
        n = world.labels[task].size
        for j in range(n):
            point = (1.0 - eps) * (0.0 if world.correct(task, task)[j] else 1.0)
            for i in range(t):
                if i != task:
                    point += eps / (t - 1) * (0.0 if world.correct(i, task)[j] else 1.0)
            total += float(priors[task]) * point / n
    return total


def risk_spec_from_world(world: DiscreteTaskWorld, priors: Sequence[float],
                         routing_errors: Sequence[float]) -> RiskSpec:
    return RiskSpec(
        priors=[float(p) for p in priors],
        risk_matrix=world.risk_matrix().tolist(),
        routing_errors=[float(e) for e in routing_errors],
    )


def simplex_grid(num_tasks: int, resolution: int) -> np.ndarray:
    """All weight vectors with entries k/(resolution−1) summing to 1"""
    if resolution < 2:
        raise ValidationError("grid resolution must be at least 2", parameter="grid_resolution")
    steps = resolution - 1
    points = [c for c in itertools.product(range(steps + 1), repeat=num_tasks - 1) if sum(c) <= steps]
    grid = np.array([list(c) + [steps - sum(c)] for c in points], dtype=np.float64)
    return grid / steps


def static_mixture_risk(world: DiscreteTaskWorld, priors: Sequence[float], alpha: np.ndarray,
                        rule: str = "expected") -> float:
    """
    0-1 risk of the fixed mixture Σ α_i f_i

    'expected' scores a point by 1 − Σ α_i·1[f_i(x) = y]; 'vote' predicts the
    class with the largest α mass, ties going to the lowest class index.
    """
    if rule not in STATIC_RULES:
        raise ValidationError(f"unknown static rule '{rule}'", parameter="rule")
    t = world.num_tasks
    risk = 0.0
    for task in range(t):
        if rule == "expected":
            hits = sum(alpha[i] * world.correct(i, task) for i in range(t))
            losses = 1.0 - hits
        else:
            mass = np.zeros((world.labels[task].size, world.num_classes))
            rows = np.arange(world.labels[task].size)
            for i in range(t):
                np.add.at(mass, (rows, world.predictions[i][task]), alpha[i])
            losses = (np.argmax(mass, axis=1) != world.labels[task]).astype(np.float64)
        risk += float(priors[task]) * float(np.mean(losses))
    return risk


def static_optimal_risk(world: DiscreteTaskWorld, grid_resolution: int,
                        priors: Optional[Sequence[float]] = None,
                        rule: str = "expected") -> Tuple[float, np.ndarray]:
    """
    Best static mixture over a simplex grid

    Args:
        world: Discrete task world
        grid_resolution: Grid points per weight axis
        priors: Task priors, uniform by default
        rule: Static mixture scoring, see static_mixture_risk

    Returns:
        (risk, weights); the first minimizing grid point in enumeration order

    Raises:
        ValidationError: For more than three tasks
    """
    t = world.num_tasks
    if t > MAX_GRID_TASKS:
        raise ValidationError(
            f"grid search supports at most {MAX_GRID_TASKS} tasks, got {t}; "
            "reduce the world or use static_risk_from_spec for the expected rule",
            parameter="world"
        )
    p = np.full(t, 1.0 / t) if priors is None else np.asarray(priors, dtype=np.float64)
    best_risk, best_alpha = math.inf, None
    for alpha in simplex_grid(t, grid_resolution):
        risk = static_mixture_risk(world, p, alpha, rule)
        if risk < best_risk:
            best_risk, best_alpha = risk, alpha
    assert best_alpha is not None
    return best_risk, best_alpha


def static_risk_from_spec(spec: RiskSpec) -> Tuple[float, np.ndarray]:
    """
    Optimal expected-rule static risk from the risk matrix alone

    The expected rule is linear in α, so the optimum sits on the vertex of the
    expert with the lowest prior-weighted risk.
    """
    averaged = spec.p @ spec.r
    best = int(np.argmin(averaged))
    alpha = np.zeros(spec.num_tasks)
    alpha[best] = 1.0
    return float(averaged[best]), alpha


def superiority_condition(spec: RiskSpec, static_opt: float) -> bool:
    """
    Whether the routing penalty stays strictly below the static gap

    Raises:
        NumericalError: If the verdict disagrees with the direct risk comparison
    """
    ideal = ideal_risk(spec)
    penalty = routing_penalty(spec)
    verdict = penalty < static_opt - ideal
    if verdict and ideal + penalty > static_opt + 1e-12:
        raise NumericalError("superiority verdict contradicts the direct risk comparison",
                             where="superiority_condition")
    return bool(verdict)


def jensen_gap_cross_entropy(p_experts: np.ndarray, alpha: np.ndarray, label: int) -> Tuple[float, float]:
    """
    Cross-entropy of the mixed prediction and the α-weighted expert cross-entropies

    Returns:
        (mixture loss, weighted loss); convexity gives mixture ≤ weighted
    """
    probs = np.asarray(p_experts, dtype=np.float64)
    weights = np.asarray(alpha, dtype=np.float64)
    if probs.ndim != 2 or weights.shape != (probs.shape[0],):
        raise ValidationError("need one probability row per weight", parameter="p_experts")
    if abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0):
        raise ValidationError("alpha must lie on the simplex", parameter="alpha")
    picked = probs[:, label]
    if np.any(picked <= 0):
        raise NumericalError("cross-entropy of a zero-probability label", where="jensen_gap_cross_entropy")
    mixture = -math.log(float(weights @ picked))
    weighted = float(weights @ -np.log(picked))
    return mixture, weighted


def random_world(num_tasks: int, points: int, num_classes: int, rng: np.random.Generator,
                 heterogeneous: bool = True) -> DiscreteTaskWorld:
    """
    Random discrete world

    With heterogeneous=True expert t is strictly the best expert on task t, so
    every pair of tasks disagrees on its best expert.
    """
    if num_tasks < 1 or points < 2 or num_classes < 2:
        raise ValidationError("need tasks ≥ 1, points ≥ 2 and classes ≥ 2", parameter="num_tasks")
    labels = tuple(rng.integers(0, num_classes, size=points) for _ in range(num_tasks))
    predictions = []
    for expert in range(num_tasks):
        tables = []
        for task in range(num_tasks):
            y = labels[task]
            if heterogeneous:
                if expert == task:
                    errors = int(rng.integers(0, points // 2))
                else:
                    errors = int(rng.integers(points // 2, points + 1))
            else:
                errors = int(rng.integers(0, points + 1))
            wrong = rng.choice(points, size=errors, replace=False)
            table = y.copy()
            table[wrong] = (y[wrong] + rng.integers(1, num_classes, size=errors)) % num_classes
            tables.append(table)
        predictions.append(tuple(tables))
    return DiscreteTaskWorld(labels, tuple(predictions), num_classes)
