import numpy as np
import pytest

from continual_merge.errors import NumericalError, RankError, ShapeMismatchError, ValidationError
from continual_merge.linalg import (
    SvdResult,
    covariance,
    diagonal_coefficients,
    orthogonal_completion,
    orthonormalize_augment,
    project_against,
    project_orthogonal_complement,
    svd,
    truncated_svd,
)


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestSvd:
    def test_identity(self):
        result = svd(np.eye(3))
        np.testing.assert_allclose(result.sigma, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(result.reconstruct(), np.eye(3), atol=1e-15)

    def test_diagonal(self):
        result = svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(result.sigma, [3.0, 2.0, 1.0], atol=1e-14)

    @pytest.mark.parametrize("method", ["lapack", "jacobi"])
    @pytest.mark.parametrize("shape", [(6, 4), (4, 6), (5, 5)])
    def test_reconstruction(self, rng, method, shape):
        a = rng.normal(size=shape)
        result = svd(a, method=method)
        assert _rel_err(result.reconstruct(), a) < 1e-8
        assert np.all(np.diff(result.sigma) <= 0)
        q = min(shape)
        np.testing.assert_allclose(result.u.T @ result.u, np.eye(q), atol=1e-10)
        np.testing.assert_allclose(result.v.T @ result.v, np.eye(q), atol=1e-10)

    def test_jacobi_oracle_agrees(self, rng):
        for _ in range(10):
            a = rng.normal(size=(6, 4))
            np.testing.assert_allclose(svd(a).sigma, svd(a, method="jacobi").sigma, atol=1e-8)

    def test_rank_deficient_jacobi(self):
        a = np.outer([1.0, 2.0, 3.0], [1.0, 0.0, 1.0])
        result = svd(a, method="jacobi")
        assert result.sigma[1] < 1e-12 and result.sigma[2] < 1e-12
        np.testing.assert_allclose(result.u.T @ result.u, np.eye(3), atol=1e-10)
        assert _rel_err(result.reconstruct(), a) < 1e-8

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            svd(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_rejects_unknown_method(self):
        with pytest.raises(ValidationError):
            svd(np.eye(2), method="power")

    def test_significant_drops_zero_directions(self):
        result = svd(np.diag([2.0, 0.0]))
        assert result.significant().rank == 1


class TestTruncatedSvd:
    def test_diagonal_eckart_young(self):
        a = np.diag([3.0, 2.0, 1.0])
        result = truncated_svd(a, 2)
        np.testing.assert_allclose(result.reconstruct(), np.diag([3.0, 2.0, 0.0]), atol=1e-14)
        assert np.linalg.norm(a - result.reconstruct()) ** 2 == pytest.approx(1.0, abs=1e-12)

    def test_full_rank_is_exact(self, rng):
        a = rng.normal(size=(5, 3))
        assert _rel_err(truncated_svd(a, 3).reconstruct(), a) < 1e-12

    def test_tail_sum_identity_on_random_matrices(self, rng):
        for _ in range(100):
            m, n = rng.integers(2, 9, size=2)
            a = rng.normal(size=(m, n))
            r = int(rng.integers(1, min(m, n) + 1))
            full = svd(a)
            err2 = np.linalg.norm(a - truncated_svd(a, r).reconstruct()) ** 2
            tail = float(np.sum(full.sigma[r:] ** 2))
            assert abs(err2 - tail) <= 1e-8 * max(1.0, float(np.sum(full.sigma ** 2)))

    @pytest.mark.parametrize("r", [0, 4])
    def test_rank_out_of_range(self, r):
        with pytest.raises(RankError):
            truncated_svd(np.eye(3), r)


class TestOrthogonalCompletion:
    def test_leading_columns_kept(self, rng):
        basis, _ = np.linalg.qr(rng.normal(size=(7, 3)))
        q = orthogonal_completion(basis)
        np.testing.assert_array_equal(q[:, :3], basis)
        np.testing.assert_allclose(q.T @ q, np.eye(7), atol=1e-12)

    def test_empty_basis(self):
        np.testing.assert_array_equal(orthogonal_completion(np.zeros((4, 0))), np.eye(4))

    def test_full_basis(self, rng):
        basis, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(orthogonal_completion(basis), basis)


class TestOrthonormalizeAugment:
    def test_duplicate_dropped(self):
        e1 = np.eye(4)[:, :1]
        out = orthonormalize_augment(e1, e1)
        assert out.shape == (4, 1)

    def test_orthogonal_appended(self):
        out = orthonormalize_augment(np.eye(4)[:, :1], np.eye(4)[:, 1:2])
        np.testing.assert_allclose(out, np.eye(4)[:, :2])

    def test_empty_existing(self):
        out = orthonormalize_augment(None, np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(out[:, 0], [0.6, 0.8])

    def test_random_augment_span(self, rng):
        existing, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        new = rng.normal(size=(8, 2))
        out = orthonormalize_augment(existing, new)
        assert out.shape == (8, 5)
        np.testing.assert_allclose(out.T @ out, np.eye(5), atol=1e-10)
        stacked = np.hstack([existing, new])
        assert np.linalg.matrix_rank(np.hstack([out, stacked])) == np.linalg.matrix_rank(stacked)

    def test_never_exceeds_rank(self, rng):
        basis = rng.normal(size=(6, 2))
        dependent = basis @ rng.normal(size=(2, 4))
        assert orthonormalize_augment(None, dependent).shape[1] == 2

    def test_row_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            orthonormalize_augment(np.eye(3)[:, :1], np.ones((4, 1)))


class TestCovariance:
    def test_single_sample(self):
        h = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(covariance([h]), np.outer(h, h))

    def test_basis_vectors(self):
        np.testing.assert_allclose(covariance(np.eye(3)[:2]), np.diag([0.5, 0.5, 0.0]))

    def test_naive_oracle(self, rng):
        x = rng.normal(size=(100, 5))
        naive = np.zeros((5, 5))
        for row in x:
            for i in range(5):
                for j in range(5):
                    naive[i, j] += row[i] * row[j]
        np.testing.assert_allclose(covariance(x), naive / 100, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            covariance([])


class TestProjection:
    def test_fully_aligned(self):
        e = np.eye(3)
        prev = svd(np.outer(e[0], e[0]))
        out = project_orthogonal_complement(np.outer(e[0], e[0]), prev)
        np.testing.assert_allclose(out, 0.0, atol=1e-15)

    def test_cross_term_kept(self):
        e = np.eye(3)
        prev = svd(np.outer(e[0], e[0]))
        delta = np.outer(e[0], e[1])
        np.testing.assert_allclose(project_orthogonal_complement(delta, prev), delta, atol=1e-15)

    def test_random_coefficient_oracle(self, rng):
        delta = rng.normal(size=(5, 4))
        prev = svd(rng.normal(size=(5, 4)))
        out = project_orthogonal_complement(delta, prev)
        assert np.max(np.abs(diagonal_coefficients(out, prev))) < 1e-10

        coeffs = prev.u.T @ delta @ prev.v
        zeroed = coeffs - np.diag(np.diag(coeffs))
        outside = delta - prev.u @ coeffs @ prev.v.T
        oracle = prev.u @ zeroed @ prev.v.T + outside
        np.testing.assert_allclose(out, oracle, atol=1e-10)

    def test_idempotent(self, rng):
        delta = rng.normal(size=(6, 3))
        prev = svd(rng.normal(size=(6, 3)))
        once = project_orthogonal_complement(delta, prev)
        np.testing.assert_allclose(project_orthogonal_complement(once, prev), once, atol=1e-10)

    def test_zero_prev_is_identity(self, rng):
        delta = rng.normal(size=(4, 4))
        np.testing.assert_allclose(project_against(delta, np.zeros((4, 4))), delta)

    def test_dimension_mismatch(self):
        prev = SvdResult(np.eye(3), np.ones(3), np.eye(3))
        with pytest.raises(ShapeMismatchError):
            project_orthogonal_complement(np.ones((2, 3)), prev)
