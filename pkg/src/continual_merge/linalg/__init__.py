"""
Dense linear algebra primitives

Singular value decompositions, subspace augmentation, uncentered covariance
and the diagonal-coefficient projection used to orthogonalize task vectors
against previously merged directions. Everything operates on float64 numpy
arrays and is a pure function of its inputs.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import CommonErrors, RankError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

Matrix = np.ndarray

SVD_METHODS = ("lapack", "jacobi")

_JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD a = u · diag(sigma) · vᵀ with u: m×q, v: n×q"""
    u: Matrix
    sigma: np.ndarray
    v: Matrix

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.v.T

    def significant(self, rtol: Optional[float] = None) -> "SvdResult":
        """Keep only directions whose singular value is numerically non-zero"""
        if self.sigma.size == 0:
            return self
        m, n = self.u.shape[0], self.v.shape[0]
        if rtol is None:
            rtol = max(m, n) * np.finfo(np.float64).eps
        keep = self.sigma > self.sigma[0] * rtol
        if self.sigma[0] == 0.0:
            keep[:] = False
        return SvdResult(self.u[:, keep], self.sigma[keep], self.v[:, keep])


def as_matrix(a: Union[Matrix, Sequence[Sequence[float]]], name: str = "matrix") -> Matrix:
    """Coerce to a finite float64 2-D array"""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got {arr.ndim} dimensions", parameter=name)
    if not np.all(np.isfinite(arr)):
        raise CommonErrors.non_finite(name)
    return arr


def _normalize_signs(u: Matrix, v: Matrix) -> None:
    """Flip singular pairs in place so each u column's largest entry is positive"""
    if u.shape[1] == 0:
        return
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs


def _complete_basis(q: Matrix, missing: int) -> Matrix:
    """Orthonormal columns spanning part of the complement of span(q)"""
    m = q.shape[0]
    stacked = np.hstack([q, np.eye(m)])
    basis, _ = np.linalg.qr(stacked)
    return basis[:, q.shape[1]:q.shape[1] + missing]


def _jacobi_svd(a: Matrix) -> SvdResult:
    """One-sided (Hestenes) Jacobi SVD for m ≥ n"""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    eps = np.finfo(np.float64).eps

    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if gamma == 0.0 or abs(gamma) <= m * eps * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp, wq = work[:, p].copy(), work[:, q].copy()
                work[:, p] = c * wp - s * wq
                work[:, q] = s * wp + c * wq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        logger.warning("Jacobi SVD did not converge in %d sweeps", _JACOBI_MAX_SWEEPS)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]

    tol = max(m, n) * eps * (sigma[0] if sigma.size else 0.0)
    nonzero = sigma > tol
    u = np.zeros((m, n))
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    missing = int((~nonzero).sum())
    if missing:
        u[:, ~nonzero] = _complete_basis(u[:, nonzero], missing)
        sigma[~nonzero] = 0.0
    return SvdResult(u, sigma, v)


def svd(a: Matrix, method: str = "lapack") -> SvdResult:
    """
    Thin singular value decomposition

    Args:
        a: Finite m×n matrix
        method: 'lapack' (numpy) or 'jacobi' (one-sided Jacobi rotations)

    Returns:
        SvdResult with q = min(m, n), sigma descending, orthonormal u and v
    """
    a = as_matrix(a, "a")
    if method not in SVD_METHODS:
        raise CommonErrors.unknown_tag("method", method, SVD_METHODS)
    m, n = a.shape
    if m == 0 or n == 0:
        raise CommonErrors.empty_input("a")

    if method == "lapack":
        u, sigma, vt = np.linalg.svd(a, full_matrices=False)
        result = SvdResult(u, sigma, vt.T.copy())
    elif m >= n:
        result = _jacobi_svd(a)
    else:
        transposed = _jacobi_svd(a.T)
        result = SvdResult(transposed.v, transposed.sigma, transposed.u)

    _normalize_signs(result.u, result.v)
    return result


def truncated_svd(a: Matrix, r: int, method: str = "lapack") -> SvdResult:
    """
    Top-r singular triple of a (Eckart–Young optimal rank-r approximation)

    Raises:
        RankError: If r is outside [1, min(rows, cols)]
    """
    a = as_matrix(a, "a")
    max_rank = min(a.shape)
    if not 1 <= r <= max_rank:
        raise RankError(r, max_rank)
    full = svd(a, method=method)
    return SvdResult(full.u[:, :r].copy(), full.sigma[:r].copy(), full.v[:, :r].copy())


def orthonormalize_augment(existing: Optional[Matrix], new_cols: Matrix,
                           tol: Optional[float] = None) -> Matrix:
    """
    Extend an orthonormal basis with new columns (Gram–Schmidt, re-orthogonalized)

    Args:
        existing: m×c matrix with orthonormal columns, or None for an empty basis
        new_cols: m×j candidate columns
        tol: Residual norm below which a candidate is dropped (default 1e-8·m)

    Returns:
        m×c' matrix, c ≤ c' ≤ c + j, orthonormal, spanning existing ∪ new_cols
    """
    new_cols = as_matrix(new_cols, "new_cols")
    m = new_cols.shape[0]
    if existing is None or np.size(existing) == 0:
        basis = np.zeros((m, 0))
    else:
        basis = as_matrix(existing, "existing")
        if basis.shape[0] != m:
            raise CommonErrors.shape_mismatch("orthonormalize_augment rows", (basis.shape[0],), (m,))
    if tol is None:
        tol = 1e-8 * m

    columns = [basis[:, i] for i in range(basis.shape[1])]
    for j in range(new_cols.shape[1]):
        candidate = new_cols[:, j].copy()
        for _ in range(2):
            for q in columns:
                candidate -= (q @ candidate) * q
        norm = np.linalg.norm(candidate)
        if norm < tol:
            continue
        columns.append(candidate / norm)

    if not columns:
        return np.zeros((m, 0))
    return np.column_stack(columns)


def orthogonal_completion(basis: Matrix) -> Matrix:
    """Square orthogonal matrix whose leading columns are the given orthonormal basis"""
    m, c = basis.shape
    if c == 0:
        return np.eye(m)
    full = np.empty((m, m))
    full[:, :c] = basis
    full[:, c:] = _complete_basis(basis, m - c)
    return full


def covariance(samples: Union[Matrix, Iterable[Sequence[float]]]) -> Matrix:
    """Uncentered covariance (1/N) Σ h hᵀ of N row samples"""
    x = np.asarray(samples if isinstance(samples, np.ndarray) else list(samples), dtype=np.float64)
    if x.size == 0:
        raise CommonErrors.empty_input("samples")
    x = as_matrix(x if x.ndim == 2 else x.reshape(1, -1), "samples")
    return (x.T @ x) / x.shape[0]


def diagonal_coefficients(delta: Matrix, prev: SvdResult) -> np.ndarray:
    """Coefficients ⟨delta, u_p v_pᵀ⟩_F for every retained singular pair of prev"""
    return np.einsum("ip,ij,jp->p", prev.u, delta, prev.v)


def project_orthogonal_complement(delta: Matrix, prev: SvdResult) -> Matrix:
    """
    Remove from delta every diagonal direction u_p v_pᵀ of a previous decomposition

    Off-diagonal coefficients (p ≠ q) and everything outside span(u) ⊗ span(v)
    are kept. Directions with a zero singular value carry nothing learned and
    are ignored, so a zero prev leaves delta unchanged.
    """
    delta = as_matrix(delta, "delta")
    if prev.u.shape[0] != delta.shape[0] or prev.v.shape[0] != delta.shape[1]:
        raise ShapeMismatchError(
            "delta incompatible with previous decomposition",
            expected=(prev.u.shape[0], prev.v.shape[0]),
            actual=delta.shape
        )
    basis = prev.significant()
    if basis.rank == 0:
        return delta.copy()
    coeffs = diagonal_coefficients(delta, basis)
    return delta - (basis.u * coeffs) @ basis.v.T


def project_against(delta: Matrix, previous_sum: Matrix) -> Matrix:
    """project_orthogonal_complement against the SVD of an accumulated matrix"""
    previous_sum = as_matrix(previous_sum, "previous_sum")
    if not np.any(previous_sum):
        return as_matrix(delta, "delta").copy()
    return project_orthogonal_complement(delta, svd(previous_sum))
