"""Segmentation evaluation: overlap ratios, surface distances, islands,
aggregation over classes and subjects, and the Friedman test
"""

import math
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage, special, stats

from .exceptions import InputError, MetricUndefinedError
from .grids import LabelMap

METRIC_NAMES = (
    'dsc', 'iou', 'precision', 'recall', 'miss_rate', 'fall_out',
    'asd_mm', 'hd_mm', 'hd95_mm',
)

AggregationOrder = Literal['subject_first', 'pooled']


class ConfusionCounts(BaseModel):
    """One-vs-rest voxel counts for a single class"""
    model_config = ConfigDict(frozen=True)

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class OverlapScores(NamedTuple):
    dsc: float
    iou: float
    precision: float
    recall: float
    miss_rate: float
    fall_out: float


class DistanceField(NamedTuple):
    distances: np.ndarray
    empty: bool


class SurfaceDistances(NamedTuple):
    asd_mm: float
    hd_mm: float
    hd95_mm: float


class IslandCount(NamedTuple):
    components: int
    islands: int


class FriedmanResult(NamedTuple):
    chi2: float
    dof: int
    p: float


class MetricsRow(BaseModel):
    """Metrics of one class of one subject

    Distances are None when a mask is empty and the metric is undefined.
    """
    model_config = ConfigDict(frozen=True)

    subject: str
    class_id: int = Field(ge=0)
    dsc: float = Field(ge=0.0, le=1.0)
    iou: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    miss_rate: float = Field(ge=0.0, le=1.0)
    fall_out: float = Field(ge=0.0, le=1.0)
    asd_mm: Optional[float] = Field(default=None, ge=0.0)
    hd_mm: Optional[float] = Field(default=None, ge=0.0)
    hd95_mm: Optional[float] = Field(default=None, ge=0.0)


class MetricsReport(BaseModel):
    """Rows plus mean and sample std (n - 1) of every metric

    A statistic is None when no row defines the metric.
    """
    model_config = ConfigDict(frozen=True)

    rows: List[MetricsRow]
    order: AggregationOrder
    n_subjects: int
    mean: Dict[str, Optional[float]]
    std: Dict[str, Optional[float]]


def _label_data(x: LabelMap | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def confusion_counts(
    pred: LabelMap | np.ndarray,
    gt: LabelMap | np.ndarray,
    class_id: int
) -> ConfusionCounts:
    """Binarize both maps as class_id vs rest and count voxels

    Raises
    ------
    InputError
        If the maps have different shapes.
    """
    pred, gt = _label_data(pred), _label_data(gt)
    if pred.shape != gt.shape:
        msg = f'shape mismatch: pred {pred.shape} vs gt {gt.shape}'
        raise InputError(msg)
    p = pred == class_id
    g = gt == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(p.size) - tp - fp - fn)


def overlap_metrics(counts: ConfusionCounts) -> OverlapScores:
    """DSC, IoU, precision, recall, miss rate and fall out

    0/0 conventions: dsc and iou are 1 when both masks are empty;
    precision is 1 if nothing was missed else 0; recall is 1 if nothing was
    falsely predicted else 0; fall out is 0 without negatives.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if tp + fp + fn == 0:
        dsc = iou = 1.0
    else:
        dsc = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    if tp + fn:
        recall = tp / (tp + fn)
        miss_rate = fn / (fn + tp)
    else:
        recall = 1.0 if fp == 0 else 0.0
        miss_rate = 1.0 - recall
    fall_out = fp / (fp + tn) if fp + tn else 0.0
    return OverlapScores(
        float(dsc), float(iou), float(precision), float(recall),
        float(miss_rate), float(fall_out)
    )


def _sampling(spacing: Sequence[float], ndim: int) -> Tuple[float, ...]:
    """Spacing in x, y(, z) order to array-axis order"""
    if len(spacing) != ndim:
        msg = f'spacing needs {ndim} components, got {len(spacing)}'
        raise InputError(msg)
    if any(s <= 0 for s in spacing):
        msg = f'spacing components must be > 0, got {tuple(spacing)}'
        raise InputError(msg)
    return tuple(float(s) for s in spacing[::-1])


def distance_transform(
    mask: np.ndarray,
    spacing: Sequence[float]
) -> DistanceField:
    """Exact Euclidean distance from each voxel to the nearest foreground
    voxel, with anisotropic spacing given in x, y(, z) order

    Returns
    -------
    DistanceField
        distances is 0 exactly on the foreground. For an empty mask every
        entry is +inf and empty is True.
    """
    mask = np.asarray(mask, dtype=bool)
    sampling = _sampling(spacing, mask.ndim)
    if not mask.any():
        return DistanceField(np.full(mask.shape, np.inf), True)
    return DistanceField(ndimage.distance_transform_edt(~mask, sampling=sampling), False)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background voxel; the image
    border counts as background"""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: Sequence[float]
) -> SurfaceDistances:
    """Average, maximum and 95th-percentile symmetric surface distance

    Raises
    ------
    InputError
        If the masks have different shapes.
    MetricUndefinedError
        If either mask is empty.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        msg = f'shape mismatch: pred {pred.shape} vs gt {gt.shape}'
        raise InputError(msg)
    if not pred.any() or not gt.any():
        msg = 'surface distances are undefined for an empty mask'
        raise MetricUndefinedError(msg)
    s_pred, s_gt = surface(pred), surface(gt)
    d_to_gt = distance_transform(s_gt, spacing).distances[s_pred]
    d_to_pred = distance_transform(s_pred, spacing).distances[s_gt]
    pooled = np.sort(np.concatenate([d_to_gt, d_to_pred]))
    asd = float(pooled.sum() / pooled.size)
    hd = float(max(d_to_gt.max(), d_to_pred.max()))
    rank = math.ceil(0.95 * pooled.size)
    return SurfaceDistances(asd, hd, float(pooled[rank - 1]))


def count_islands(mask: np.ndarray, connectivity: Literal['face'] = 'face') -> IslandCount:
    """Face-connected components; islands are all but the largest"""
    if connectivity != 'face':
        msg = f'{connectivity} is not a supported connectivity. Use "face"'
        raise InputError(msg)
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    _, components = ndimage.label(mask, structure=structure)
    return IslandCount(int(components), max(int(components) - 1, 0))


def evaluate_case(
    pred: LabelMap,
    gt: LabelMap,
    subject: str,
    classes: Optional[Sequence[int]] = None,
    spacing: Optional[Sequence[float]] = None
) -> List[MetricsRow]:
    """Metric rows for every requested class of one subject

    Parameters
    ----------
    pred, gt : LabelMap
        Prediction and ground truth of equal shape.
    subject : str
        Subject id recorded on every row.
    classes : Sequence[int] (optional)
        Defaults to the foreground classes 1 .. C - 1.
    spacing : Sequence[float] (optional)
        Defaults to the ground truth spacing.
    """
    if pred.shape != gt.shape:
        msg = f'shape mismatch: pred {pred.shape} vs gt {gt.shape}'
        raise InputError(msg)
    if classes is None:
        classes = range(1, max(pred.num_classes, gt.num_classes))
    spacing = tuple(spacing) if spacing is not None else gt.spacing
    rows = []
    for class_id in classes:
        scores = overlap_metrics(confusion_counts(pred, gt, class_id))
        try:
            dist = surface_metrics(pred.data == class_id, gt.data == class_id, spacing)
            distances = dist._asdict()
        except MetricUndefinedError:
            distances = {}
        rows.append(MetricsRow(
            subject=subject, class_id=class_id, **scores._asdict(), **distances
        ))
    return rows


def _mean_std(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate_report(
    rows: Sequence[MetricsRow],
    order: AggregationOrder = 'subject_first'
) -> MetricsReport:
    """Mean and sample std of every metric

    subject_first averages the classes of each subject, then aggregates
    across subjects. pooled aggregates all rows directly. Undefined
    (None) values are skipped.

    Raises
    ------
    InputError
        If rows is empty or order is unknown.
    """
    if not rows:
        msg = 'at least one metrics row is required'
        raise InputError(msg)
    if order not in ('subject_first', 'pooled'):
        msg = f'{order} is not a valid order. Use "subject_first" or "pooled"'
        raise InputError(msg)
    rows = sorted(rows, key=lambda r: (r.subject, r.class_id))
    subjects = sorted({r.subject for r in rows})
    mean: Dict[str, Optional[float]] = {}
    std: Dict[str, Optional[float]] = {}
    for name in METRIC_NAMES:
        if order == 'pooled':
            values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        else:
            values = []
            for subject in subjects:
                defined = [
                    getattr(r, name) for r in rows
                    if r.subject == subject and getattr(r, name) is not None
                ]
                if defined:
                    values.append(float(np.mean(defined)))
        mean[name], std[name] = _mean_std(values)
    return MetricsReport(
        rows=list(rows), order=order, n_subjects=len(subjects), mean=mean, std=std
    )


def friedman_test(scores: np.ndarray | Sequence[Sequence[float]]) -> FriedmanResult:
    """Friedman rank test that k methods perform equally over n subjects

    chi2 = 12 / (n k (k + 1)) * sum_j R_j^2 - 3 n (k + 1), with tied scores
    sharing their mean rank and no tie correction. p is the chi-square
    survival function with k - 1 degrees of freedom.

    Parameters
    ----------
    scores : array_like
        n subjects x k methods.

    Raises
    ------
    InputError
        If n < 2, k < 2 or a score is not finite.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        msg = f'need an n >= 2 by k >= 2 score table, got shape {scores.shape}'
        raise InputError(msg)
    if not np.all(np.isfinite(scores)):
        msg = 'scores must be finite'
        raise InputError(msg)
    n, k = scores.shape
    ranks = stats.rankdata(scores, method='average', axis=1)
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    chi2 = max(chi2, 0.0)
    dof = k - 1
    p = float(special.gammaincc(dof / 2.0, chi2 / 2.0))
    return FriedmanResult(chi2, dof, p)
