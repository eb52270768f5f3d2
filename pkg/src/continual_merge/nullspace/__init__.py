"""
Null-space gating

Protected input-feature subspaces per gated layer, interference scores kept
as exponential moving averages of gradient alignment, and the hard and
relaxed projectors applied to gate-weight gradients during adaptation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..errors import CommonErrors, ShapeMismatchError, ValidationError
from ..linalg import as_matrix, orthogonal_completion, orthonormalize_augment, svd

logger = logging.getLogger(__name__)

PROJECTION_MODES = ("none", "hard", "relaxed")


@dataclass
class SubspaceBank:
    """Orthonormal protected directions U per gated layer, at most k new columns per task"""
    k: int
    bases: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def empty(cls, layer_dims: Dict[int, int], k: int) -> "SubspaceBank":
        if k < 1:
            raise ValidationError("k must be at least 1", parameter="k")
        return cls(k, {layer: np.zeros((dim, 0)) for layer, dim in layer_dims.items()})

    def basis(self, layer: int) -> np.ndarray:
        return self.bases[layer]

    def columns(self, layer: int) -> int:
        return int(self.bases[layer].shape[1])

    @property
    def is_empty(self) -> bool:
        return all(u.shape[1] == 0 for u in self.bases.values())


@dataclass
class InterferenceTracker:
    """EMA interference scores S per bank column; reset for every task"""
    beta: float = 0.99
    gamma: float = 1.0
    scores: Dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_bank(cls, bank: SubspaceBank, beta: float = 0.99, gamma: float = 1.0) -> "InterferenceTracker":
        if not 0.0 <= beta < 1.0:
            raise ValidationError("beta must lie in [0, 1)", parameter="beta")
        if gamma <= 0:
            raise ValidationError("gamma must be positive", parameter="gamma")
        return cls(beta, gamma, {layer: np.zeros(bank.columns(layer)) for layer in bank.bases})

    def lambdas(self, layer: int) -> np.ndarray:
        return shrinkage(self.scores[layer], self.gamma)


@dataclass(frozen=True)
class TraceRecord:
    task: int
    step: int
    layer: int
    mean_ratio: float
    mean_score: float
    mean_lambda: float


def extract_task_subspace(activations: np.ndarray, k: int) -> np.ndarray:
    """
    Top-k eigenvectors of the uncentered covariance of the activations

    Computed from the SVD of the sample matrix. Directions carrying no energy
    are dropped, so fewer than k columns come back for rank-deficient data.

    Raises:
        ValidationError: If there are fewer samples than k
    """
    h = as_matrix(activations, "activations")
    if k < 1:
        raise ValidationError("k must be at least 1", parameter="k")
    if h.shape[0] < k:
        raise ValidationError(
            f"need at least k={k} samples, got {h.shape[0]}", parameter="activations"
        )
    decomposition = svd(h).significant()
    return decomposition.v[:, :k].copy()


def alignment_ratios(grad: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """r_p = |u_pᵀ g| / ‖g‖; all zeros for a zero gradient"""
    g = np.asarray(grad, dtype=np.float64)
    if basis.shape[0] != g.shape[0]:
        raise CommonErrors.shape_mismatch("gradient vs bank", (basis.shape[0],), g.shape)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return np.zeros(basis.shape[1])
    return np.abs(basis.T @ g) / norm


def update_scores(tracker: InterferenceTracker, layer: int, ratios: np.ndarray) -> InterferenceTracker:
    """S ← β·S + (1−β)·r"""
    current = tracker.scores[layer]
    if ratios.shape != current.shape:
        raise ShapeMismatchError("ratios do not match the tracked directions",
                                 expected=current.shape, actual=ratios.shape)
    tracker.scores[layer] = tracker.beta * current + (1.0 - tracker.beta) * ratios
    return tracker


def shrinkage(scores: np.ndarray, gamma: float) -> np.ndarray:
    """λ_p = exp(−γ·S_p); a zero score keeps full protection for any γ"""
    with np.errstate(invalid="ignore", over="ignore"):
        lam = np.exp(-gamma * scores)
    return np.where(scores > 0.0, lam, 1.0)


def relaxed_project(grad: np.ndarray, basis: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """(I − U Λ Uᵀ)·g"""
    g = np.asarray(grad, dtype=np.float64)
    if basis.shape[0] != g.shape[0] or basis.shape[1] != lambdas.shape[0]:
        raise ShapeMismatchError(
            "projector operands disagree",
            expected=(g.shape[0], lambdas.shape[0]),
            actual=basis.shape
        )
    if basis.shape[1] == 0:
        return g.copy()
    return g - basis @ (lambdas * (basis.T @ g))


def hard_project(grad: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """(I − U Uᵀ)·g"""
    return relaxed_project(grad, basis, np.ones(basis.shape[1]))


def augment_bank(bank: SubspaceBank, layer: int, new_subspace: np.ndarray) -> SubspaceBank:
    """Concatenate a task's dominant directions into the layer's basis and re-orthonormalize"""
    new_subspace = as_matrix(new_subspace, "new_subspace")
    if new_subspace.shape[1] > bank.k:
        raise ValidationError(f"at most k={bank.k} directions per task", parameter="new_subspace")
    current = bank.bases[layer]
    if current.shape[0] != new_subspace.shape[0]:
        raise CommonErrors.shape_mismatch("augment_bank rows", (current.shape[0],), (new_subspace.shape[0],))
    bank.bases[layer] = orthonormalize_augment(current, new_subspace)
    logger.debug("layer %d bank grew to %d directions", layer, bank.columns(layer))
    return bank


class NullSpaceProjector:
    """
    Per-step gradient transform used by the adaptation loop

    In 'relaxed' mode observe() folds the gradient's alignment into the
    interference scores; project() then applies I − UΛUᵀ with the updated
    shrinkage. rotation() gives the orthogonal basis [U, U⊥] in which that
    projector is diagonal.
    """

    def __init__(self, bank: SubspaceBank, mode: str = "relaxed", beta: float = 0.99, gamma: float = 1.0,
                 task: int = 0):
        if mode not in PROJECTION_MODES:
            raise CommonErrors.unknown_tag("projection", mode, PROJECTION_MODES)
        self.bank = bank
        self.mode = mode
        self.tracker = InterferenceTracker.for_bank(bank, beta, gamma)
        self.task = task
        self.trace: List[TraceRecord] = []
        self._rotations: Dict[int, np.ndarray] = {}

    @property
    def active(self) -> bool:
        return self.mode != "none" and not self.bank.is_empty

    def lambdas(self, layer: int) -> np.ndarray:
        if self.mode == "hard":
            return np.ones(self.bank.columns(layer))
        return self.tracker.lambdas(layer)

    def observe(self, layer: int, grad: np.ndarray, step: int) -> None:
        """Update interference statistics from the raw gradient of one layer"""
        basis = self.bank.basis(layer)
        if basis.shape[1] == 0:
            return
        ratios = alignment_ratios(grad, basis)
        if self.mode == "relaxed":
            update_scores(self.tracker, layer, ratios)
        self.tracker.step = step
        scores = self.tracker.scores[layer]
        self.trace.append(TraceRecord(
            task=self.task,
            step=step,
            layer=layer,
            mean_ratio=float(ratios.mean()),
            mean_score=float(scores.mean()),
            mean_lambda=float(self.lambdas(layer).mean()),
        ))

    def rotation(self, layer: int) -> np.ndarray:
        """[U, U⊥] for one layer; the bank does not change while a task adapts"""
        if layer not in self._rotations:
            self._rotations[layer] = orthogonal_completion(self.bank.basis(layer))
        return self._rotations[layer]

    def project(self, layer: int, vector: np.ndarray) -> np.ndarray:
        if not self.active or layer not in self.bank.bases:
            return vector
        return relaxed_project(vector, self.bank.basis(layer), self.lambdas(layer))


def trace_rows(records: List[TraceRecord]) -> List[Dict[str, float]]:
    return [
        {"task": r.task, "step": r.step, "layer": r.layer, "mean_ratio": r.mean_ratio,
         "mean_score": r.mean_score, "mean_lambda": r.mean_lambda}
        for r in records
    ]


def projector_matrix(basis: np.ndarray, lambdas: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense I − U Λ Uᵀ, for diagnostics"""
    lam = np.ones(basis.shape[1]) if lambdas is None else lambdas
    return np.eye(basis.shape[0]) - (basis * lam) @ basis.T
