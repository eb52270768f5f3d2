"""Low-rank experts built from orthogonally projected task vectors."""

import hashlib
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import RankError, ValidationError
from ..linalg import SvdResult, project_against, svd, truncated_svd
from ..mergers import TaskVector


@dataclass(frozen=True)
class LowRankExpert:
    """f(x) = B·A·x + c with B ≈ ŨΣ̃ (d_out×r), A = Ṽᵀ (r×d_in), c the projected bias delta"""
    b_factor: np.ndarray
    a_factor: np.ndarray
    bias: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.a_factor.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.a_factor.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.b_factor.shape[0])

    def dense(self) -> np.ndarray:
        return self.b_factor @ self.a_factor

    def apply(self, h: np.ndarray) -> np.ndarray:
        return (h @ self.a_factor.T) @ self.b_factor.T + self.bias

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for array in (self.b_factor, self.a_factor, self.bias):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


# (Σ B·A, Σ c) of the experts already merged into one layer
PriorSum = Tuple[np.ndarray, np.ndarray]


def build_layer_expert(weight_delta: np.ndarray, bias_delta: np.ndarray, prior: Optional[PriorSum],
                       r: int) -> LowRankExpert:
    """Project one layer's delta away from the prior expert sum, then truncate to rank r"""
    max_rank = min(weight_delta.shape)
    if not 1 <= r <= max_rank:
        raise RankError(r, max_rank)
    if prior is None:
        projected_w, projected_b = weight_delta, bias_delta
    else:
        projected_w = project_against(weight_delta, prior[0])
        projected_b = project_against(bias_delta.reshape(-1, 1), prior[1].reshape(-1, 1)).ravel()
    top = truncated_svd(projected_w, r)
    b_factor = top.u * top.sigma
    a_factor = top.v.T.copy()
    if prior is not None and np.any(prior[0]):
        b_factor = _restore_diagonal_constraint(b_factor, a_factor, svd(prior[0]).significant())
    return LowRankExpert(
        b_factor=b_factor,
        a_factor=a_factor,
        bias=np.array(projected_b, dtype=np.float64),
    )


def _restore_diagonal_constraint(b_factor: np.ndarray, a_factor: np.ndarray, prior: SvdResult) -> np.ndarray:
    """
    Closest B (Frobenius) with ⟨B·A, u_p v_pᵀ⟩ = 0 for every prior direction, A fixed

    Truncating the projected delta can reintroduce small diagonal coefficients;
    with orthonormal rows in A this least-squares correction of B is also the
    best rank-r fit to the projected delta under the constraint. It is zero when
    the truncation already satisfies it.
    """
    if prior.rank == 0:
        return b_factor
    # constraint p reads ⟨B, u_p (A v_p)ᵀ⟩ = 0
    directions = np.stack([np.outer(prior.u[:, p], a_factor @ prior.v[:, p]).ravel()
                           for p in range(prior.rank)])
    violations = directions @ b_factor.ravel()
    if not np.any(violations):
        return b_factor
    multipliers, *_ = np.linalg.lstsq(directions @ directions.T, violations, rcond=None)
    return b_factor - (multipliers @ directions).reshape(b_factor.shape)


def build_expert(delta: TaskVector, prior_experts_sum: Optional[Dict[int, PriorSum]], r: int,
                 is_first_task: bool, layers: Optional[Sequence[int]] = None) -> Dict[int, LowRankExpert]:
    """
    Per-layer low-rank experts for one task

    Args:
        delta: Task vector θ_t − θ₀
        prior_experts_sum: Per-layer sums of the experts merged so far
        r: Expert rank
        is_first_task: Skip projection (nothing merged yet)
        layers: Layers receiving an expert; all layers by default

    Returns:
        Mapping layer index → expert
    """
    targets = list(range(len(delta.layers))) if layers is None else list(layers)
    if not is_first_task and prior_experts_sum is None:
        raise ValidationError("prior expert sums are required after the first task",
                              parameter="prior_experts_sum")
    experts: Dict[int, LowRankExpert] = {}
    for l in targets:
        layer = delta.layers[l]
        prior = None if is_first_task else prior_experts_sum[l]  # type: ignore[index]
        experts[l] = build_layer_expert(layer.weight, layer.bias, prior, r)
    return experts
