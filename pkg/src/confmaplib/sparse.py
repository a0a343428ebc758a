"""CSR matrices, preconditioned conjugate gradient and a dense oracle solver

The CSR storage is a scipy `csr_array`; assembly is done here so that the
result is bit-identical for any ordering of the input triplets.
"""

import logging
import warnings
from typing import Callable, Iterable, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from .exceptions import ConvergenceError, InputError

logger = logging.getLogger(__name__)

Preconditioner = Literal['none', 'jacobi', 'ilu']
PRECONDITIONERS = ('none', 'jacobi', 'ilu')

# Incomplete LU settings; pivoting off keeps the factors close to A's
# symmetric sparsity pattern
ILU_DROP_TOL = 1e-4
ILU_FILL_FACTOR = 10.0

DENSE_SOLVE_MAX_N = 4096


class CsrMatrix:
    """An immutable square matrix in compressed sparse row form

    Attributes
    ----------
    n : int
        Dimension.
    row_ptr : numpy.ndarray
        n + 1 nondecreasing offsets into col_idx / values.
    col_idx : numpy.ndarray
        Column index of each stored entry, strictly increasing per row.
    values : numpy.ndarray
        float64 entries.
    symmetric : bool
        Flag set by the producer when value(i, j) == value(j, i).
    """

    def __init__(self, matrix: sparse.csr_array, symmetric: bool = False) -> None:
        if matrix.shape[0] != matrix.shape[1]:
            msg = f'CsrMatrix must be square, got shape {matrix.shape}'
            raise InputError(msg)
        self._matrix = matrix
        for arr in (matrix.indptr, matrix.indices, matrix.data):
            arr.setflags(write=False)
        self.symmetric = symmetric


    @property
    def n(self) -> int:
        return int(self._matrix.shape[0])


    @property
    def row_ptr(self) -> np.ndarray:
        return self._matrix.indptr


    @property
    def col_idx(self) -> np.ndarray:
        return self._matrix.indices


    @property
    def values(self) -> np.ndarray:
        return self._matrix.data


    @property
    def nnz(self) -> int:
        return int(self._matrix.nnz)


    def diagonal(self) -> np.ndarray:
        return self._matrix.diagonal()


    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()


    def to_scipy(self) -> sparse.csr_array:
        return self._matrix


    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return spmv(self, x)


class SolverStats(BaseModel):
    """Outcome of an iterative solve

    Attributes
    ----------
    iterations : int
        CG iterations performed.
    final_relative_residual : float
        ||A x - b|| / ||b|| of the returned iterate (true residual).
    converged : bool
        True if the relative residual reached tol.
    tol : float
        The requested relative tolerance.
    """
    model_config = ConfigDict(frozen=True)

    iterations: int
    final_relative_residual: float
    converged: bool
    tol: float

    @model_validator(mode='after')
    def _converged_within_tol(self) -> 'SolverStats':
        if self.converged and self.final_relative_residual > self.tol:
            msg = 'converged stats must have final_relative_residual <= tol'
            raise ValueError(msg)
        return self


def assemble_csr(
    triplets: Iterable[Tuple[int, int, float]] | Tuple[np.ndarray, np.ndarray, np.ndarray],
    n: Optional[int] = None,
    symmetric: bool = False
) -> CsrMatrix:
    """Build a CSR matrix from (row, col, value) triplets

    Duplicate (row, col) entries are summed. Triplets are sorted by
    (row, col, value) before summation, so any permutation of the input
    gives a bit-identical matrix.

    Parameters
    ----------
    triplets : iterable of (row, col, value), or a (rows, cols, values)
        tuple of equally long arrays.
    n : int (optional)
        Matrix dimension. Defaults to the largest index + 1.
    symmetric : bool
        Recorded on the result; not checked here.

    Raises
    ------
    InputError
        If an index is negative or >= n.
    """
    if isinstance(triplets, tuple) and len(triplets) == 3 and all(
        isinstance(t, np.ndarray) for t in triplets
    ):
        rows, cols, vals = triplets
    else:
        items = list(triplets)
        if items:
            rows, cols, vals = (np.asarray(col) for col in zip(*items))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if not (rows.shape == cols.shape == vals.shape):
        msg = 'rows, cols and values must have equal length'
        raise InputError(msg)
    if n is None:
        n = int(max(rows.max(initial=-1), cols.max(initial=-1)) + 1)
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
        msg = f'triplet index out of range for n={n}'
        raise InputError(msg)
    # Canonical order makes the duplicate sums independent of input order
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    keys = rows * n + cols
    if keys.size:
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        summed = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    else:
        summed = vals
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    matrix = sparse.csr_array((summed, cols, row_ptr), shape=(n, n))
    return CsrMatrix(matrix, symmetric=symmetric)


def spmv(A: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """y = A x

    Raises
    ------
    InputError
        If len(x) != A.n.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.n,):
        msg = f'vector of length {A.n} expected, got shape {x.shape}'
        raise InputError(msg)
    return A.to_scipy() @ x


def _make_preconditioner(
    A: CsrMatrix, preconditioner: Preconditioner
) -> Callable[[np.ndarray], np.ndarray]:
    """z = M^-1 r for the requested preconditioner M"""
    if preconditioner == 'none':
        return lambda r: r.copy()
    if preconditioner == 'jacobi':
        diag = A.diagonal()
        if np.any(diag <= 0):
            msg = 'matrix has non-positive diagonal entries, not SPD'
            raise InputError(msg)
        inv_diag = 1.0 / diag
        return lambda r: inv_diag * r
    try:
        factor = sparse_linalg.spilu(
            sparse.csc_matrix(A.to_scipy()),
            drop_tol=ILU_DROP_TOL,
            fill_factor=ILU_FILL_FACTOR,
            permc_spec='MMD_AT_PLUS_A',
            diag_pivot_thresh=0.0,
            options={'SymmetricMode': True},
        )
    except RuntimeError as err:
        msg = f'incomplete LU factorization failed: {err}'
        raise InputError(msg) from err
    return factor.solve


def cg_solve(
    A: CsrMatrix,
    b: np.ndarray,
    tol: float = 1e-6,
    max_iter: Optional[int] = None,
    preconditioner: Preconditioner = 'jacobi'
) -> Tuple[np.ndarray, SolverStats]:
    """Solve A x = b for symmetric positive definite A

    Parameters
    ----------
    A : CsrMatrix
        SPD system matrix.
    b : numpy.ndarray
        Right-hand side.
    tol : float
        Relative residual target ||A x - b|| / ||b||.
    max_iter : int (optional)
        Iteration cap. Defaults to 10 * n.
    preconditioner : {"none", "jacobi", "ilu"}
        Plain CG, diagonal scaling, or an incomplete LU factorization
        (scipy SuperLU) applied as M^-1.

    Returns
    -------
    Tuple[numpy.ndarray, SolverStats]
        The solution and its statistics.

    Raises
    ------
    InputError
        Dimension mismatch, non-finite b, unknown preconditioner, or a
        breakdown showing A is not positive definite.
    ConvergenceError
        If tol is not reached after max_iter iterations. The exception
        carries the best iterate and stats.
    """
    b = np.asarray(b, dtype=np.float64)
    n = A.n
    if b.shape != (n,):
        msg = f'right-hand side of length {n} expected, got shape {b.shape}'
        raise InputError(msg)
    if not np.all(np.isfinite(b)):
        msg = 'right-hand side contains non-finite values'
        raise InputError(msg)
    if preconditioner not in PRECONDITIONERS:
        msg = (
            f"{preconditioner} is not a valid preconditioner. "
            f"Use one of {', '.join(PRECONDITIONERS)}"
        )
        raise InputError(msg)
    if max_iter is None:
        max_iter = 10 * n

    norm_b = np.linalg.norm(b)
    x = np.zeros(n, dtype=np.float64)
    if norm_b == 0.0:
        return x, SolverStats(
            iterations=0, final_relative_residual=0.0, converged=True, tol=tol
        )

    apply_inverse = _make_preconditioner(A, preconditioner)
    M = A.to_scipy()
    r = b.copy()
    z = apply_inverse(r)
    p = z.copy()
    rz = r @ z
    best_x, best_res = x.copy(), 1.0
    k = 0
    rel = 1.0
    while k < max_iter:
        Ap = M @ p
        pAp = p @ Ap
        if pAp <= 0:
            msg = 'conjugate gradient breakdown: matrix is not positive definite'
            raise InputError(msg)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        k += 1
        rel = np.linalg.norm(r) / norm_b
        if rel <= tol:
            # Confirm against the true residual, restart from it if it drifted
            r = b - M @ x
            rel = np.linalg.norm(r) / norm_b
            if rel <= tol:
                best_x, best_res = x, rel
                break
            z = apply_inverse(r)
            p = z.copy()
            rz = r @ z
            continue
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        z = apply_inverse(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new

    if best_res <= tol:
        stats = SolverStats(
            iterations=k, final_relative_residual=float(best_res), converged=True, tol=tol
        )
        logger.debug('cg converged: n=%d iterations=%d residual=%.3e', n, k, best_res)
        return best_x, stats

    true_res = float(np.linalg.norm(b - M @ best_x) / norm_b)
    stats = SolverStats(
        iterations=k, final_relative_residual=true_res, converged=False, tol=tol
    )
    logger.warning(
        'cg did not converge: n=%d iterations=%d residual=%.3e tol=%.1e',
        n, k, true_res, tol
    )
    msg = f'CG did not reach tol={tol} within {max_iter} iterations (residual {true_res:.3e})'
    raise ConvergenceError(msg, best_x, stats)


def dense_solve(A: np.ndarray | Sequence[Sequence[float]], b: np.ndarray) -> np.ndarray:
    """Direct solve by LU factorization with partial pivoting

    Parameters
    ----------
    A : array_like
        Nonsingular n x n matrix, n <= 4096.
    b : array_like
        Right-hand side of length n.

    Raises
    ------
    InputError
        If shapes disagree, n exceeds 4096, or a pivot is exactly zero.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        msg = f'square matrix expected, got shape {A.shape}'
        raise InputError(msg)
    n = A.shape[0]
    if n > DENSE_SOLVE_MAX_N:
        msg = f'dense_solve supports n <= {DENSE_SOLVE_MAX_N}, got {n}'
        raise InputError(msg)
    if b.shape != (n,):
        msg = f'right-hand side of length {n} expected, got shape {b.shape}'
        raise InputError(msg)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A)
    if np.any(np.diag(lu) == 0.0):
        msg = 'matrix is singular (zero pivot)'
        raise InputError(msg)
    return scipy.linalg.lu_solve((lu, piv), b)


def is_spd(A: np.ndarray) -> bool:
    """True if the dense matrix is symmetric and Cholesky succeeds"""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True
