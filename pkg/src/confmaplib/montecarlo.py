"""Monte-Carlo random-walk estimate of the confidence map

An independent check on the linear-system formulation: walkers start at a
pixel, step to a neighbour with probability w / sum(w) and are absorbed at
the top row (counts 1) or the bottom row (counts 0). Not used to produce
shipped maps.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .confidence import ConfidenceMap, EdgeWeights, RwParams, attenuation_field, edge_weights
from .exceptions import CensoredWalksError, InputError
from .grids import Image2D

logger = logging.getLogger(__name__)

MAX_CENSORED_FRACTION = 0.01


class McConfig(BaseModel):
    """Monte-Carlo settings

    Attributes
    ----------
    walks_per_pixel : int
        Walks started from every pixel.
    max_steps : int (optional)
        Steps after which a walk is censored. Defaults to 8 * H^2 * W.
    seed : int
        64-bit seed; with the pixel index it keys a counter-based
        (Philox) stream per pixel.
    """
    model_config = ConfigDict(frozen=True)

    walks_per_pixel: int = Field(default=10_000, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)

    def resolved_max_steps(self, height: int, width: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return 8 * height * height * width


def _transition_table(weights: EdgeWeights) -> Tuple[np.ndarray, np.ndarray]:
    """Neighbour ids and cumulative transition probabilities per pixel

    Returns arrays of shape (H * W, 8). Unused slots point at the pixel
    itself and carry cumulative probability 1, so they are never drawn.
    """
    n_pixels = weights.height * weights.width
    p, q, w = weights.edges()
    src = np.concatenate([p, q])
    dst = np.concatenate([q, p])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    starts = np.searchsorted(src, np.arange(n_pixels))
    slot = np.arange(src.size) - starts[src]

    nbr = np.repeat(np.arange(n_pixels, dtype=np.int64)[:, None], 8, axis=1)
    wt = np.zeros((n_pixels, 8), dtype=np.float64)
    nbr[src, slot] = dst
    wt[src, slot] = ww

    degree = np.bincount(src, minlength=n_pixels)
    total = wt.sum(axis=1)
    total[total == 0] = 1.0
    cum = np.cumsum(wt, axis=1) / total[:, None]
    # Pin the last real slot and every padding slot to exactly 1
    cols = np.arange(8)[None, :]
    cum[cols >= (degree - 1)[:, None]] = 1.0
    return nbr, cum


def _walk_from(
    start: int,
    nbr: np.ndarray,
    cum: np.ndarray,
    height: int,
    width: int,
    walks: int,
    max_steps: int,
    seed: int
) -> Tuple[int, int]:
    """Simulate all walks of one pixel; returns (absorbed at top, censored)"""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, start], dtype=np.uint64)))
    pos = np.full(walks, start, dtype=np.int64)
    hits = 0
    steps = 0
    while pos.size and steps < max_steps:
        u = rng.random(pos.size)
        choice = (u[:, None] >= cum[pos]).sum(axis=1)
        pos = nbr[pos, choice]
        row = pos // width
        hits += int(np.count_nonzero(row == 0))
        pos = pos[(row != 0) & (row != height - 1)]
        steps += 1
    return hits, int(pos.size)


def mc_confidence(
    img: Image2D,
    params: Optional[RwParams] = None,
    cfg: Optional[McConfig] = None,
    workers: int = 1
) -> Tuple[ConfidenceMap, np.ndarray]:
    """Estimate the confidence map by simulating random walks

    Parameters
    ----------
    img : Image2D
        Slice with H >= 3.
    params : RwParams (optional)
        Edge weight parameters, same as for compute_confidence_map.
    cfg : McConfig (optional)
        Walk count, step cap and seed.
    workers : int
        Threads over pixels. Results do not depend on this value.

    Returns
    -------
    Tuple[ConfidenceMap, numpy.ndarray]
        The estimate (fraction of uncensored walks absorbed at the top) and
        the per-pixel standard error sqrt(p (1 - p) / n).

    Raises
    ------
    InputError
        If the image has fewer than 3 rows.
    CensoredWalksError
        If more than 1% of all walks were censored.
    """
    params = params or RwParams()
    cfg = cfg or McConfig()
    H, W = img.height, img.width
    if H < 3:
        msg = f'at least 3 rows are required, got H={H}'
        raise InputError(msg)
    weights = edge_weights(attenuation_field(img, params.alpha), params)
    nbr, cum = _transition_table(weights)
    max_steps = cfg.resolved_max_steps(H, W)
    interior = list(range(W, (H - 1) * W))

    def _run(start: int) -> Tuple[int, int]:
        return _walk_from(
            start, nbr, cum, H, W, cfg.walks_per_pixel, max_steps, cfg.seed
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, interior))
    else:
        results = [_run(start) for start in interior]

    estimate = np.zeros(H * W, dtype=np.float64)
    std_error = np.zeros(H * W, dtype=np.float64)
    estimate[:W] = 1.0
    censored_total = 0
    for start, (hits, censored) in zip(interior, results):
        censored_total += censored
        n_ok = cfg.walks_per_pixel - censored
        p_hat = hits / n_ok if n_ok else 0.5
        estimate[start] = p_hat
        std_error[start] = np.sqrt(p_hat * (1.0 - p_hat) / n_ok) if n_ok else 0.5
    cm = ConfidenceMap(data=estimate.reshape(H, W))
    std_error = std_error.reshape(H, W)

    total = cfg.walks_per_pixel * len(interior)
    if censored_total:
        logger.warning('%d of %d walks censored at %d steps', censored_total, total, max_steps)
    if total and censored_total / total > MAX_CENSORED_FRACTION:
        msg = (
            f'{censored_total} of {total} walks censored '
            f'(more than {MAX_CENSORED_FRACTION:.0%}); raise max_steps'
        )
        raise CensoredWalksError(msg, cm, censored_total, total)
    return cm, std_error
