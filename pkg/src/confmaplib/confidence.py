"""Ultrasound confidence maps by the random-walker Dirichlet problem

Pixels are graph nodes joined by an 8-neighbourhood. The top row is the
source (confidence 1), the bottom row the sink (confidence 0). The
confidence of every other pixel is the probability that a random walk
started there reaches the top row first, i.e. the solution of the
Laplacian restricted to the unknown rows.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import sparse

from .exceptions import ConvergenceError, InputError, PartialMapError
from .grids import Image2D, Volume3D
from .sparse import CsrMatrix, Preconditioner, SolverStats, cg_solve

logger = logging.getLogger(__name__)

SQRT2 = float(np.sqrt(2.0))

# Interior values stay strictly inside (0, 1) after the float32 cast
INTERIOR_MIN = float(np.finfo(np.float32).tiny)
INTERIOR_MAX = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


class RwParams(BaseModel):
    """Random-walk edge weight and solver parameters

    Attributes
    ----------
    alpha : float
        Beer-Lambert attenuation coefficient per unit normalized depth.
    beta : float
        Penalization of intensity differences between neighbours.
    gamma : float
        Beam-shape penalty for horizontal edges, scaled by sqrt(2) on
        diagonals.
    epsilon : float
        Weight floor; keeps the graph connected.
    tol : float
        CG relative residual target.
    max_iter : int (optional)
        CG iteration cap, max_iter_factor * unknowns when None.
    max_iter_factor : int
    preconditioner : {"none", "jacobi", "ilu"}
        Incomplete LU by default; Jacobi needs thousands of iterations on
        full-size frames.
    """
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=2.0, ge=0.0)
    beta: float = Field(default=90.0, ge=0.0)
    gamma: float = Field(default=0.05, ge=0.0)
    epsilon: float = Field(default=1e-6, gt=0.0)
    tol: float = Field(default=1e-6, gt=0.0)
    max_iter: Optional[int] = Field(default=None, gt=0)
    max_iter_factor: int = Field(default=10, gt=0)
    preconditioner: Preconditioner = 'ilu'


class ConfidenceMap(BaseModel):
    """Per-pixel confidence in [0, 1]; top row 1, bottom row 0

    Attributes
    ----------
    data : numpy.ndarray
        float32 array of shape (H, W), H >= 2.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @field_validator('data', mode='before')
    @classmethod
    def _coerce_data(cls, value: Any) -> np.ndarray:
        arr = np.array(value, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 1:
            msg = f'ConfidenceMap needs shape (H >= 2, W >= 1), got {arr.shape}'
            raise ValueError(msg)
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            msg = 'ConfidenceMap values must lie in [0, 1]'
            raise ValueError(msg)
        if np.any(arr[0] != 1.0) or np.any(arr[-1] != 0.0):
            msg = 'ConfidenceMap top row must be 1 and bottom row 0'
            raise ValueError(msg)
        arr.setflags(write=False)
        return arr

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])


class EdgeWeights(BaseModel):
    """One weight per undirected 8-neighbourhood edge

    Every array holds float64 weights >= epsilon. Pixel (r, c) is joined to:

    vertical        (r + 1, c)       shape (H - 1, W)
    horizontal      (r, c + 1)       shape (H, W - 1)
    diag_right      (r + 1, c + 1)   shape (H - 1, W - 1)
    diag_left       (r + 1, c - 1)   shape (H - 1, W - 1), indexed by (r, c - 1)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    height: int
    width: int
    vertical: np.ndarray
    horizontal: np.ndarray
    diag_right: np.ndarray
    diag_left: np.ndarray

    def edges(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat pixel endpoints (p, q) and weights of every edge"""
        H, W = self.height, self.width
        idx = np.arange(H * W, dtype=np.int64).reshape(H, W)
        p = np.concatenate([
            idx[:-1, :].ravel(),
            idx[:, :-1].ravel(),
            idx[:-1, :-1].ravel(),
            idx[:-1, 1:].ravel(),
        ])
        q = np.concatenate([
            idx[1:, :].ravel(),
            idx[:, 1:].ravel(),
            idx[1:, 1:].ravel(),
            idx[1:, :-1].ravel(),
        ])
        w = np.concatenate([
            self.vertical.ravel(),
            self.horizontal.ravel(),
            self.diag_right.ravel(),
            self.diag_left.ravel(),
        ])
        return p, q, w


class SparseSystem(BaseModel):
    """Dirichlet-reduced Laplacian system L_U x = rhs

    Attributes
    ----------
    matrix : CsrMatrix
        Laplacian restricted to the unknown pixels (rows 1 .. H - 2).
    rhs : numpy.ndarray
        Summed weights from each unknown to source pixels.
    unknown_index : numpy.ndarray
        Flat pixel index (r * W + c) of each unknown, ascending.
    height, width : int
        Image dimensions.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: CsrMatrix
    rhs: np.ndarray
    unknown_index: np.ndarray
    height: int
    width: int


def attenuation_field(img: Image2D, alpha: float) -> np.ndarray:
    """Beer-Lambert attenuated intensities c = g * exp(-alpha * l)

    Parameters
    ----------
    img : Image2D
        Intensities g in [0, 1].
    alpha : float
        Attenuation coefficient, >= 0.

    Returns
    -------
    numpy.ndarray
        float64 grid of shape (H, W) with values in [0, 1].
    """
    if alpha < 0:
        msg = f'alpha must be >= 0, got {alpha}'
        raise InputError(msg)
    decay = np.exp(-alpha * img.depth())
    return img.data.astype(np.float64) * decay[:, None]


def edge_weights(c: np.ndarray, params: RwParams) -> EdgeWeights:
    """Edge weights of the 8-neighbourhood image graph

    vertical    exp(-beta * |ci - cj|) + eps
    horizontal  exp(-beta * (|ci - cj| + gamma)) + eps
    diagonal    exp(-beta * (|ci - cj| + sqrt(2) * gamma)) + eps

    Raises
    ------
    InputError
        If c is not a finite 2D grid.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        msg = 'attenuation field must be a finite 2D grid'
        raise InputError(msg)
    beta, gamma, eps = params.beta, params.gamma, params.epsilon
    vertical = np.exp(-beta * np.abs(c[1:, :] - c[:-1, :])) + eps
    horizontal = np.exp(-beta * (np.abs(c[:, 1:] - c[:, :-1]) + gamma)) + eps
    diag_right = np.exp(-beta * (np.abs(c[1:, 1:] - c[:-1, :-1]) + SQRT2 * gamma)) + eps
    diag_left = np.exp(-beta * (np.abs(c[1:, :-1] - c[:-1, 1:]) + SQRT2 * gamma)) + eps
    return EdgeWeights(
        height=c.shape[0],
        width=c.shape[1],
        vertical=vertical,
        horizontal=horizontal,
        diag_right=diag_right,
        diag_left=diag_left,
    )


def dirichlet_system(weights: EdgeWeights) -> SparseSystem:
    """Reduce the graph Laplacian with source row 0 and sink row H - 1

    Raises
    ------
    InputError
        If H < 3 (no unknown row).
    """
    H, W = weights.height, weights.width
    if H < 3:
        msg = f'at least 3 rows are required, got H={H}'
        raise InputError(msg)
    n_pixels = H * W
    p, q, w = weights.edges()

    degree = np.bincount(p, weights=w, minlength=n_pixels) \
        + np.bincount(q, weights=w, minlength=n_pixels)

    # Map pixel -> unknown index, -1 for boundary pixels
    unknown_of = np.full(n_pixels, -1, dtype=np.int64)
    unknown_index = np.arange(W, n_pixels - W, dtype=np.int64)
    unknown_of[unknown_index] = np.arange(unknown_index.size, dtype=np.int64)
    up, uq = unknown_of[p], unknown_of[q]

    inner = (up >= 0) & (uq >= 0)
    rows = np.concatenate([up[inner], uq[inner], np.arange(unknown_index.size)])
    cols = np.concatenate([uq[inner], up[inner], np.arange(unknown_index.size)])
    vals = np.concatenate([-w[inner], -w[inner], degree[unknown_index]])
    # Every (row, col) occurs once, so no triplet summation is needed
    csr = sparse.csr_array((vals, (rows, cols)), shape=(unknown_index.size,) * 2)
    csr.sum_duplicates()
    matrix = CsrMatrix(csr, symmetric=True)

    # Edges from an unknown to the source row; the sink contributes zero
    is_source = np.zeros(n_pixels, dtype=bool)
    is_source[:W] = True
    rhs = np.zeros(unknown_index.size, dtype=np.float64)
    to_source = (up >= 0) & is_source[q]
    from_source = (uq >= 0) & is_source[p]
    rhs += np.bincount(up[to_source], weights=w[to_source], minlength=rhs.size)
    rhs += np.bincount(uq[from_source], weights=w[from_source], minlength=rhs.size)

    return SparseSystem(
        matrix=matrix, rhs=rhs, unknown_index=unknown_index, height=H, width=W
    )


def assemble_map(system: SparseSystem, x: np.ndarray) -> ConfidenceMap:
    """Scatter a solution of the reduced system back onto the full grid"""
    full = np.zeros(system.height * system.width, dtype=np.float64)
    full[:system.width] = 1.0
    full[system.unknown_index] = np.clip(x, INTERIOR_MIN, INTERIOR_MAX)
    return ConfidenceMap(data=full.reshape(system.height, system.width))


def compute_confidence_map(
    img: Image2D,
    params: Optional[RwParams] = None
) -> Tuple[ConfidenceMap, SolverStats]:
    """Confidence map of a single slice

    Pipeline: attenuation_field -> edge_weights -> dirichlet_system ->
    cg_solve. Interior values are clamped into the open interval (0, 1)
    representable in float32; boundary rows are exactly 1 and 0.

    Parameters
    ----------
    img : Image2D
        Slice with W >= 1 and H >= 3.
    params : RwParams (optional)
        Defaults to RwParams().

    Returns
    -------
    Tuple[ConfidenceMap, SolverStats]

    Raises
    ------
    InputError
        If the image has fewer than 3 rows.
    PartialMapError
        If CG does not converge; carries the map built from the best
        iterate.
    """
    params = params or RwParams()
    c = attenuation_field(img, params.alpha)
    system = dirichlet_system(edge_weights(c, params))
    try:
        x, stats = cg_solve(
            system.matrix,
            system.rhs,
            tol=params.tol,
            max_iter=params.max_iter or params.max_iter_factor * system.matrix.n,
            preconditioner=params.preconditioner,
        )
    except ConvergenceError as err:
        partial = assemble_map(system, err.x)
        msg = f'confidence map did not converge: {err}'
        raise PartialMapError(msg, err.x, err.stats, partial) from err
    logger.debug(
        'confidence map %dx%d solved in %d iterations',
        img.width, img.height, stats.iterations
    )
    return assemble_map(system, x), stats


def compute_volume_confidence(
    vol: Volume3D,
    params: Optional[RwParams] = None,
    workers: int = 1
) -> Volume3D:
    """Confidence of every z-slice, solved independently

    Output is identical for any worker count.

    Raises
    ------
    PartialMapError
        With slice_index set to the first failing slice.
    """
    params = params or RwParams()

    def _solve(z: int) -> np.ndarray:
        try:
            cm, _ = compute_confidence_map(vol.slice(z), params)
        except PartialMapError as err:
            msg = f'slice {z}: {err}'
            raise PartialMapError(msg, err.x, err.stats, err.partial, slice_index=z) from err
        return cm.data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            slices = list(pool.map(_solve, range(vol.depth)))
    else:
        slices = [_solve(z) for z in range(vol.depth)]
    return Volume3D(data=np.stack(slices), spacing=vol.spacing)


def sweep_pairs(
    alphas: Sequence[float],
    betas: Sequence[float]
) -> List[Tuple[float, float]]:
    """(alpha, beta) pairs of a parameter sweep

    Equal-length lists are zipped pairwise, otherwise the Cartesian product
    is taken.
    """
    if not alphas or not betas:
        msg = 'alpha and beta lists must be non-empty'
        raise InputError(msg)
    if len(alphas) == len(betas):
        return [(float(a), float(b)) for a, b in zip(alphas, betas)]
    return [(float(a), float(b)) for a, b in product(alphas, betas)]


def sweep_confidence(
    img: Image2D,
    alphas: Sequence[float],
    betas: Sequence[float],
    params: Optional[RwParams] = None,
    workers: int = 1
) -> List[Tuple[Tuple[float, float], ConfidenceMap]]:
    """Confidence maps for a grid of (alpha, beta) settings"""
    params = params or RwParams()
    pairs = sweep_pairs(alphas, betas)

    def _solve(pair: Tuple[float, float]) -> ConfidenceMap:
        alpha, beta = pair
        cm, _ = compute_confidence_map(
            img, RwParams(**{**params.model_dump(), 'alpha': alpha, 'beta': beta})
        )
        return cm

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(_solve, pairs))
    else:
        maps = [_solve(pair) for pair in pairs]
    return list(zip(pairs, maps))


def depth_profile(grid: np.ndarray | ConfidenceMap) -> np.ndarray:
    """Mean value of each row (the beam-direction decay curve)"""
    data = grid.data if isinstance(grid, ConfidenceMap) else np.asarray(grid)
    return data.astype(np.float64).mean(axis=1)
