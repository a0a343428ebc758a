"""End-to-end jobs behind the command-line subcommands

Each function reads its inputs from disk, calls the library and writes its
artifacts. They return in-memory results so the CLI and tests can inspect
what was written without re-reading it.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .confidence import (
    ConfidenceMap, RwParams, assemble_map, attenuation_field, compute_confidence_map,
    compute_volume_confidence, dirichlet_system, edge_weights, sweep_confidence,
)
from .exceptions import InputError
from .formats import GridKind, decode_grid, decode_pgm, grid_from, read_grid, write_grid, write_pgm
from .grids import Image2D, LabelMap, Volume3D, normalize_intensities, one_hot_encode
from .losses import LossKind, LossValue, confidence_mask, entropy_map, loss_value
from .metrics import METRIC_NAMES, AggregationOrder, MetricsReport, aggregate_report, evaluate_case
from .montecarlo import McConfig, mc_confidence
from .phantom import PhantomSpec
from .segmenter import StudyReport, TrainConfig, run_study
from .sparse import dense_solve

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('subject', 'class') + METRIC_NAMES


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def load_input(
    path: Path | str,
    spacing: Optional[Sequence[float]] = None
) -> Image2D | Volume3D:
    """Read a PGM image or a float CMG1 grid

    PGM files are recognized by their P5 magic. A CMG1 grid of depth 1 is
    returned as an Image2D, deeper grids as a Volume3D. spacing, when
    given, replaces the stored (or PGM default 1 mm) spacing: (sx, sy) for
    images, (sx, sy[, sz]) for volumes.
    """
    data = Path(path).read_bytes()
    if data.startswith(b'P5'):
        pgm = decode_pgm(data)
        source = normalize_intensities(pgm.samples, pgm.max_value)
    else:
        grid = decode_grid(data)
        if grid.kind is not GridKind.FLOAT32:
            msg = f'{path}: expected a float grid, got labels'
            raise InputError(msg)
        source = grid.to_image() if grid.depth == 1 else grid.to_volume()
    return _with_spacing(source, spacing)


def _with_spacing(
    source: Image2D | Volume3D,
    spacing: Optional[Sequence[float]]
) -> Image2D | Volume3D:
    if spacing is None:
        return source
    spacing = tuple(float(s) for s in spacing)
    if isinstance(source, Volume3D):
        if len(spacing) == 2:
            spacing += (source.spacing[2],)
        if len(spacing) != 3:
            msg = f'volume spacing takes 2 or 3 values, got {len(spacing)}'
            raise InputError(msg)
        return Volume3D(data=source.data, spacing=spacing)
    if len(spacing) != 2:
        msg = f'image spacing takes 2 values (sx sy), got {len(spacing)}'
        raise InputError(msg)
    return Image2D(data=source.data, spacing=spacing)


def grid_spacing(source: Image2D | Volume3D) -> Tuple[float, float, float]:
    """The (sx, sy, sz) a CMG1 grid derived from source is written with"""
    if isinstance(source, Volume3D):
        return tuple(source.spacing)
    return tuple(source.spacing) + (1.0,)


def load_labels(path: Path | str) -> LabelMap:
    return read_grid(path).to_label_map()


def load_confidence(path: Path | str) -> ConfidenceMap:
    return read_grid(path).to_confidence_map()


def _write(
    obj: Any,
    path: Path | str,
    spacing: Optional[Tuple[float, float, float]] = None
) -> Path:
    path = Path(path)
    write_grid(grid_from(obj, spacing), path)
    logger.info('wrote %s', path)
    return path


def write_json(payload: str, path: Path | str) -> Path:
    path = Path(path)
    path.write_text(payload + '\n', encoding='utf-8')
    logger.info('wrote %s', path)
    return path


# ---------------------------------------------------------------------------
# Confidence maps
# ---------------------------------------------------------------------------

def compute(
    in_path: Path | str,
    out_path: Path | str,
    params: Optional[RwParams] = None,
    workers: int = 1,
    export_pgm: Optional[Path | str] = None
    spacing: Optional[Sequence[float]] = None
) -> ConfidenceMap | Volume3D:
    """Confidence map of an image or volume, written as CMG1

    export_pgm additionally writes the (first slice of the) map quantized
    to 8 bits. The map is stored with the input spacing, or with spacing
    when given.
    """
    params = params or RwParams()
    source = load_input(in_path, spacing)
    if isinstance(source, Volume3D):
        result = compute_volume_confidence(source, params, workers)
        _write(result, out_path)
        preview = result.data[0]
    else:
        result, stats = compute_confidence_map(source, params)
        _write(result, out_path, grid_spacing(source))
        preview = result.data
        logger.info(
            'converged in %d iterations, residual %.2e',
            stats.iterations, stats.final_relative_residual
        )
    if export_pgm is not None:
        write_pgm(preview, export_pgm)
        logger.info('wrote %s', export_pgm)
    return result


def sweep_filename(alpha: float, beta: float) -> str:
    return f'cm_a{alpha:g}_b{beta:g}.cmg'


def sweep(
    in_path: Path | str,
    out_dir: Path | str,
    alphas: Sequence[float],
    betas: Sequence[float],
    params: Optional[RwParams] = None,
    workers: int = 1,
    spacing: Optional[Sequence[float]] = None
) -> List[Path]:
    """One confidence map per (alpha, beta) pair in out_dir"""
    source = load_input(in_path, spacing)
    if not isinstance(source, Image2D):
        msg = 'sweep needs a single 2D image'
        raise InputError(msg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (alpha, beta), cm in sweep_confidence(source, alphas, betas, params, workers):
        written.append(
            _write(cm, out_dir / sweep_filename(alpha, beta), grid_spacing(source))
        )
    return written


# ---------------------------------------------------------------------------
# Masks and losses
# ---------------------------------------------------------------------------

def mask(
    labels_path: Path | str,
    cm_path: Path | str,
    out_path: Path | str
) -> np.ndarray:
    """Write the confidence-weighted one-hot target Y * CM, one class per z"""
    labels = load_labels(labels_path)
    cm = load_confidence(cm_path)
    if labels.data.ndim != 2:
        msg = 'mask needs 2D labels'
        raise InputError(msg)
    masked = confidence_mask(one_hot_encode(labels), cm)
    _write(masked, out_path)
    return masked.data


def loss(
    kind: LossKind | str,
    labels_path: Path | str,
    pred_path: Path | str,
    cm_path: Optional[Path | str] = None
) -> LossValue:
    """Evaluate a loss on stored labels and a stored probability map"""
    labels = load_labels(labels_path)
    y = one_hot_encode(labels)
    y_hat = read_grid(pred_path).to_prob_map(normalized=True)
    cm = load_confidence(cm_path) if cm_path is not None else None
    return loss_value(kind, y, y_hat, cm)


def entropy(
    prob_paths: Sequence[Path | str],
    out_path: Path | str
) -> np.ndarray:
    """Predictive entropy of K stored probability maps"""
    if not prob_paths:
        msg = 'at least one probability map is required'
        raise InputError(msg)
    predictions = [read_grid(p).to_prob_map(normalized=True) for p in prob_paths]
    result = entropy_map(predictions)
    _write(result, out_path)
    return result


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metrics_frame(rows: Sequence[Any]) -> pd.DataFrame:
    """MetricsRow objects as a table with the CSV column names"""
    records = [
        {'subject': r.subject, 'class': r.class_id, **{m: getattr(r, m) for m in METRIC_NAMES}}
        for r in rows
    ]
    frame = pd.DataFrame.from_records(records, columns=list(CSV_COLUMNS))
    # undefined distances -> NaN -> blank cell
    return frame.astype({m: 'float64' for m in METRIC_NAMES})


def metrics(
    preds: Sequence[Path | str],
    gts: Sequence[Path | str],
    out_csv: Path | str,
    out_json: Optional[Path | str] = None,
    subjects: Optional[Sequence[str]] = None,
    spacing: Optional[Sequence[float]] = None,
    order: AggregationOrder = 'subject_first',
    float_format: str = '%.6g'
) -> MetricsReport:
    """Evaluate prediction/ground-truth pairs and write CSV (+ JSON)

    Distances are blank in the CSV and null in the JSON when undefined.
    """
    if len(preds) != len(gts) or not preds:
        msg = f'need matching --pred/--gt pairs, got {len(preds)} and {len(gts)}'
        raise InputError(msg)
    if subjects is None:
        subjects = [Path(p).stem for p in gts]
    elif len(subjects) != len(gts):
        msg = f'{len(subjects)} subject names for {len(gts)} cases'
        raise InputError(msg)
    rows = []
    for pred_path, gt_path, subject in zip(preds, gts, subjects):
        pred, gt = load_labels(pred_path), load_labels(gt_path)
        rows.extend(evaluate_case(pred, gt, subject, spacing=spacing))
    report = aggregate_report(rows, order)

    out_csv = Path(out_csv)
    metrics_frame(report.rows).to_csv(
        out_csv, index=False, float_format=float_format, na_rep='', lineterminator='\n'
    )
    logger.info('wrote %s', out_csv)
    if out_json is not None:
        write_json(report.model_dump_json(indent=2), out_json)
    return report


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def oracle_mc(
    in_path: Path | str,
    out_path: Path | str,
    params: Optional[RwParams] = None,
    cfg: Optional[McConfig] = None,
    workers: int = 1,
    stderr_path: Optional[Path | str] = None,
    spacing: Optional[Sequence[float]] = None
) -> Dict[str, float]:
    """Monte-Carlo estimate, its standard error, and its gap to the CG map"""
    params = params or RwParams()
    source = load_input(in_path, spacing)
    if not isinstance(source, Image2D):
        msg = 'the Monte-Carlo oracle needs a single 2D image'
        raise InputError(msg)
    estimate, std_error = mc_confidence(source, params, cfg, workers)
    _write(estimate, out_path, grid_spacing(source))
    if stderr_path is not None:
        _write(std_error, stderr_path, grid_spacing(source))
    cm, _ = compute_confidence_map(source, params)
    diff = np.abs(estimate.data.astype(np.float64) - cm.data.astype(np.float64))
    within = diff <= 3.0 * std_error + 1e-12
    return {
        'max_abs_diff': float(diff.max()),
        'fraction_within_3se': float(within.mean()),
    }


def oracle_dense(
    in_path: Path | str,
    out_path: Path | str,
    params: Optional[RwParams] = None,
    spacing: Optional[Sequence[float]] = None
) -> Dict[str, float]:
    """Direct (LU) solve of the Dirichlet system and its gap to the CG map"""
    params = params or RwParams()
    source = load_input(in_path, spacing)
    if not isinstance(source, Image2D):
        msg = 'the dense oracle needs a single 2D image'
        raise InputError(msg)
    system = dirichlet_system(edge_weights(attenuation_field(source, params.alpha), params))
    exact = assemble_map(system, dense_solve(system.matrix.to_dense(), system.rhs))
    _write(exact, out_path, grid_spacing(source))
    cm, _ = compute_confidence_map(source, params)
    diff = np.abs(exact.data.astype(np.float64) - cm.data.astype(np.float64))
    return {'max_abs_diff': float(diff.max())}


# ---------------------------------------------------------------------------
# Toy study
# ---------------------------------------------------------------------------

def train_toy(
    out_json: Path | str,
    configurations: Sequence[str],
    seeds: Sequence[int],
    spec: Optional[PhantomSpec] = None,
    train: Optional[TrainConfig] = None,
    params: Optional[RwParams] = None,
    workers: int = 1,
    entropy_members: int = 0
) -> StudyReport:
    report = run_study(
        configurations, seeds, spec, train, params, workers, entropy_members
    )
    write_json(report.model_dump_json(indent=2), out_json)
    return report


def summary_json(payload: Dict[str, Any] | LossValue) -> str:
    if isinstance(payload, LossValue):
        return payload.model_dump_json(indent=2)
    return json.dumps(payload, indent=2)
