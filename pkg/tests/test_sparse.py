"""Tests for confmaplib.sparse — CSR assembly, spmv, CG and the dense oracle"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import sparse

from confmaplib.confidence import RwParams, dirichlet_system, edge_weights
from confmaplib.exceptions import ConvergenceError, InputError
from confmaplib.sparse import (
    CsrMatrix, SolverStats, assemble_csr, cg_solve, dense_solve, is_spd, spmv,
)


def csr_from_dense(A, symmetric=False):
    rows, cols = np.nonzero(A)
    return assemble_csr((rows, cols, A[rows, cols]), n=A.shape[0], symmetric=symmetric)


def grid_laplacian(size, shift=0.0):
    """Dirichlet 5-point Laplacian on a size x size grid."""
    n = size * size
    A = np.zeros((n, n))
    for r in range(size):
        for c in range(size):
            i = r * size + c
            A[i, i] = 4.0 + shift
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < size and 0 <= cc < size:
                    A[i, rr * size + cc] = -1.0
    return A


# ---------------------------------------------------------------------------
# assemble_csr
# ---------------------------------------------------------------------------

class TestAssembleCsr:

    def test_single_entry(self):
        A = assemble_csr([(0, 0, 1.0)], n=1)
        assert A.n == 1
        assert_array_equal(A.to_dense(), [[1.0]])

    def test_duplicates_are_summed(self):
        """Repeated (row, col) triplets add up."""
        A = assemble_csr([(0, 1, 2.0), (0, 1, 3.0)], n=2)
        assert A.nnz == 1
        assert A.to_dense()[0, 1] == 5.0

    def test_permutation_is_bit_identical(self, rng):
        """Triplet order does not change a single bit of the matrix."""
        rows = rng.integers(0, 10, 200)
        cols = rng.integers(0, 10, 200)
        vals = rng.standard_normal(200)
        A = assemble_csr((rows, cols, vals), n=10)
        perm = rng.permutation(200)
        B = assemble_csr((rows[perm], cols[perm], vals[perm]), n=10)
        assert_array_equal(A.row_ptr, B.row_ptr)
        assert_array_equal(A.col_idx, B.col_idx)
        assert A.values.tobytes() == B.values.tobytes()

    def test_columns_strictly_increasing_per_row(self, rng):
        A = assemble_csr(
            (rng.integers(0, 6, 50), rng.integers(0, 6, 50), rng.random(50)), n=6
        )
        for i in range(A.n):
            cols = A.col_idx[A.row_ptr[i]:A.row_ptr[i + 1]]
            assert np.all(np.diff(cols) > 0)

    def test_index_out_of_range(self):
        with pytest.raises(InputError, match="out of range"):
            assemble_csr([(0, 3, 1.0)], n=3)

    def test_dimension_inferred(self):
        assert assemble_csr([(2, 0, 1.0)]).n == 3

    def test_storage_is_read_only(self):
        """Assembled arrays cannot be written to."""
        A = assemble_csr([(0, 0, 1.0)], n=1)
        with pytest.raises(ValueError):
            A.values[0] = 2.0

    def test_non_square_rejected(self):
        with pytest.raises(InputError):
            CsrMatrix(sparse.csr_array(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# spmv
# ---------------------------------------------------------------------------

class TestSpmv:

    def test_identity(self, rng):
        x = rng.standard_normal(5)
        assert_array_equal(spmv(csr_from_dense(np.eye(5)), x), x)

    def test_column_read_off(self):
        A = csr_from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]))
        assert_array_equal(spmv(A, np.array([1.0, 0.0])), [4.0, 1.0])

    def test_matches_dense(self, rng):
        D = rng.standard_normal((8, 8))
        x = rng.standard_normal(8)
        assert_allclose(spmv(csr_from_dense(D), x), D @ x, rtol=0, atol=1e-14)

    def test_unit_vectors_give_columns(self, rng):
        """A e_i reproduces column i bit for bit."""
        D = rng.standard_normal((12, 12)) * (rng.random((12, 12)) < 0.3)
        A = csr_from_dense(D)
        for i in range(12):
            e = np.zeros(12)
            e[i] = 1.0
            assert_array_equal(spmv(A, e), D[:, i])

    def test_length_mismatch(self):
        with pytest.raises(InputError, match="length 2"):
            spmv(csr_from_dense(np.eye(2)), np.ones(3))


# ---------------------------------------------------------------------------
# cg_solve
# ---------------------------------------------------------------------------

class TestCgSolve:

    def test_identity_one_iteration(self, rng):
        b = rng.standard_normal(6)
        x, stats = cg_solve(csr_from_dense(np.eye(6)), b)
        assert_allclose(x, b)
        assert stats.iterations == 1
        assert stats.converged

    def test_two_by_two(self):
        A = csr_from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]))
        x, stats = cg_solve(A, np.array([1.0, 2.0]), tol=1e-12)
        assert_allclose(x, [1 / 11, 7 / 11], atol=1e-12)
        assert stats.final_relative_residual <= 1e-12

    def test_zero_rhs(self):
        x, stats = cg_solve(csr_from_dense(np.eye(3)), np.zeros(3))
        assert_array_equal(x, np.zeros(3))
        assert stats.iterations == 0
        assert stats.converged

    @pytest.mark.parametrize("preconditioner", ["none", "jacobi", "ilu"])
    def test_grid_laplacian_matches_dense(self, rng, preconditioner):
        D = grid_laplacian(32)
        b = rng.random(D.shape[0])
        x, _ = cg_solve(csr_from_dense(D, True), b, tol=1e-10, preconditioner=preconditioner)
        assert_allclose(x, dense_solve(D, b), rtol=0, atol=1e-6)

    def test_random_spd_matches_dense(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 65))
            M = rng.standard_normal((n, n))
            D = M.T @ M + n * np.eye(n)
            b = rng.standard_normal(n)
            x, stats = cg_solve(csr_from_dense(D, True), b, tol=1e-10)
            assert stats.final_relative_residual <= 1e-10
            assert_allclose(x, dense_solve(D, b), rtol=0, atol=1e-8)

    def test_jacobi_iterations_within_ten_n(self, rng):
        """Jacobi-PCG on well-conditioned SPD systems stays under the 10 n cap."""
        for _ in range(200):
            n = int(rng.integers(1, 65))
            M = rng.standard_normal((n, n))
            D = M.T @ M + n * np.eye(n)
            _, stats = cg_solve(
                csr_from_dense(D, True), rng.standard_normal(n), tol=1e-10,
                preconditioner="jacobi"
            )
            assert stats.converged
            assert stats.iterations <= 10 * n

    def test_ilu_needs_fewer_iterations_than_jacobi(self, rng):
        system = dirichlet_system(edge_weights(rng.random((40, 40)), RwParams()))
        _, jacobi = cg_solve(system.matrix, system.rhs, tol=1e-8, preconditioner="jacobi")
        x, ilu = cg_solve(system.matrix, system.rhs, tol=1e-8, preconditioner="ilu")
        assert ilu.converged
        assert ilu.iterations < jacobi.iterations
        assert np.all(np.isfinite(x))

    def test_residual_is_true_residual(self, rng):
        """Reported residual is recomputed from b - A x."""
        D = grid_laplacian(8, shift=0.1)
        b = rng.random(64)
        x, stats = cg_solve(csr_from_dense(D, True), b, tol=1e-8)
        true = np.linalg.norm(D @ x - b) / np.linalg.norm(b)
        assert true <= 1e-8
        assert stats.final_relative_residual == pytest.approx(true, rel=1e-6, abs=1e-15)

    def test_non_convergence_carries_best_iterate(self, rng):
        """The error carries the last iterate and its residual."""
        D = grid_laplacian(16)
        b = rng.random(256)
        with pytest.raises(ConvergenceError) as excinfo:
            cg_solve(csr_from_dense(D, True), b, tol=1e-14, max_iter=3)
        err = excinfo.value
        assert err.x.shape == (256,)
        assert err.stats.iterations == 3
        assert not err.stats.converged
        assert err.stats.final_relative_residual <= 1.0

    def test_indefinite_matrix_breakdown(self):
        """A non-positive curvature stops CG with an error."""
        A = csr_from_dense(np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(InputError, match="not positive definite|non-positive"):
            cg_solve(A, np.array([1.0, 1.0]), preconditioner="none")

    def test_unknown_preconditioner(self):
        with pytest.raises(InputError, match="not a valid preconditioner"):
            cg_solve(csr_from_dense(np.eye(2)), np.ones(2), preconditioner="multigrid")

    def test_non_finite_rhs(self):
        with pytest.raises(InputError):
            cg_solve(csr_from_dense(np.eye(2)), np.array([1.0, np.nan]))


class TestSolverStats:

    def test_converged_requires_residual_within_tol(self):
        """converged is never set on a residual above tol."""
        with pytest.raises(ValueError):
            SolverStats(iterations=3, final_relative_residual=1e-3, converged=True, tol=1e-6)


# ---------------------------------------------------------------------------
# dense_solve / is_spd
# ---------------------------------------------------------------------------

class TestDenseSolve:

    def test_identity(self):
        assert_array_equal(dense_solve(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        assert_allclose(dense_solve([[2.0, 0.0], [0.0, 4.0]], np.array([2.0, 4.0])), [1.0, 1.0])

    def test_two_by_two(self):
        x = dense_solve([[4.0, 1.0], [1.0, 3.0]], np.array([1.0, 2.0]))
        assert_allclose(x, [1 / 11, 7 / 11], atol=1e-15)

    def test_singular_rejected(self):
        with pytest.raises(InputError, match="singular"):
            dense_solve(np.zeros((2, 2)), np.ones(2))

    def test_too_large_rejected(self):
        with pytest.raises(InputError, match="n <= 4096"):
            dense_solve(np.broadcast_to(0.0, (4097, 4097)), np.ones(4097))


class TestIsSpd:

    def test_spd(self):
        assert is_spd(np.array([[4.0, 1.0], [1.0, 3.0]]))

    def test_not_symmetric(self):
        assert not is_spd(np.array([[4.0, 1.0], [0.0, 3.0]]))

    def test_indefinite(self):
        assert not is_spd(np.array([[1.0, 0.0], [0.0, -1.0]]))
