"""Confidence masks, confidence-weighted losses and their gradients

All losses average over every voxel, background included:

    CE_conf = -(1/m) sum_i sum_c Y_ic * CM_i * log(Yhat_ic)

CE is the CM == 1 case. Soft dice is
1 - (1/C) sum_c (2 sum_i Y Yhat + s) / (sum_i Y + sum_i Yhat + s).
Gradients are taken with respect to the logits of a per-voxel softmax.
"""

from enum import StrEnum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import softmax

from .confidence import ConfidenceMap
from .exceptions import InputError
from .grids import ProbMap

LOG_CLAMP = 1e-12
DICE_SMOOTH = 1e-5


class LossKind(StrEnum):
    CE = 'ce'
    CE_CONF = 'ce_conf'
    DICE = 'dice'
    DICE_CE = 'dice_ce'
    DICE_CE_CONF = 'dice_ce_conf'

    @property
    def requires_confidence(self) -> bool:
        return self in (LossKind.CE_CONF, LossKind.DICE_CE_CONF)

    @property
    def has_ce(self) -> bool:
        return self is not LossKind.DICE

    @property
    def has_dice(self) -> bool:
        return self in (LossKind.DICE, LossKind.DICE_CE, LossKind.DICE_CE_CONF)


class LossValue(BaseModel):
    """A loss total and its parts

    Attributes
    ----------
    kind : LossKind
    total : float
    components : Dict[str, float]
        "ce" or "ce_conf" and/or "dice", whichever the kind combines.
    class_dice : Tuple[float, ...]
        Per-class soft dice scores when the kind includes dice.
    """
    model_config = ConfigDict(frozen=True)

    kind: LossKind
    total: float
    components: Dict[str, float]
    class_dice: Tuple[float, ...] = ()


def _as_array(x: ProbMap | ConfidenceMap | np.ndarray) -> np.ndarray:
    if isinstance(x, (ProbMap, ConfidenceMap)):
        return x.data.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _flatten(
    y: ProbMap | np.ndarray,
    other: ProbMap | np.ndarray,
    cm: Optional[ConfidenceMap | np.ndarray],
    kind: Optional[LossKind] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten to (m, C) targets, (m, C) second operand and (m,) weights"""
    y = _as_array(y)
    other = _as_array(other)
    if y.shape != other.shape:
        msg = f'shape mismatch: targets {y.shape} vs predictions {other.shape}'
        raise InputError(msg)
    if kind is not None and kind.requires_confidence and cm is None:
        msg = f'loss kind {kind.value} requires a confidence map'
        raise InputError(msg)
    n_classes = y.shape[-1]
    y2 = y.reshape(-1, n_classes)
    o2 = other.reshape(-1, n_classes)
    if cm is None or (kind is not None and not kind.requires_confidence):
        w = np.ones(y2.shape[0], dtype=np.float64)
    else:
        cm_arr = _as_array(cm)
        if cm_arr.shape != y.shape[:-1]:
            msg = f'confidence map shape {cm_arr.shape} does not match {y.shape[:-1]}'
            raise InputError(msg)
        w = cm_arr.reshape(-1)
    return y2, o2, w


def confidence_mask(
    y: ProbMap,
    cm: ConfidenceMap | np.ndarray
) -> ProbMap:
    """Element-wise Y * CM, the confidence-weighted target

    Raises
    ------
    InputError
        If the CM does not match the spatial dims of y.
    """
    cm_arr = _as_array(cm)
    if cm_arr.shape != y.spatial_shape:
        msg = f'confidence map shape {cm_arr.shape} does not match {y.spatial_shape}'
        raise InputError(msg)
    return ProbMap(data=y.data * cm_arr[..., None], normalized=False)


def _weighted_ce(y: np.ndarray, p: np.ndarray, w: np.ndarray) -> float:
    log_p = np.log(np.maximum(p, LOG_CLAMP))
    return float(-(w * (y * log_p).sum(axis=1)).sum() / y.shape[0])


def _soft_dice(y: np.ndarray, p: np.ndarray, smooth: float) -> Tuple[float, np.ndarray]:
    intersect = (y * p).sum(axis=0)
    union = y.sum(axis=0) + p.sum(axis=0)
    per_class = (2.0 * intersect + smooth) / (union + smooth)
    return float(1.0 - per_class.mean()), per_class


def loss_value(
    kind: LossKind | str,
    y: ProbMap | np.ndarray,
    y_hat: ProbMap | np.ndarray,
    cm: Optional[ConfidenceMap | np.ndarray] = None,
    smooth: float = DICE_SMOOTH
) -> LossValue:
    """Evaluate one of the loss kinds

    Parameters
    ----------
    kind : LossKind | str
        ce, ce_conf, dice, dice_ce or dice_ce_conf.
    y : ProbMap | numpy.ndarray
        One-hot targets, channels last.
    y_hat : ProbMap | numpy.ndarray
        Normalized predictions of the same shape.
    cm : ConfidenceMap | numpy.ndarray (optional)
        Confidence over the spatial dims; required by *_conf kinds.
    smooth : float
        Soft-dice smoothing s.

    Raises
    ------
    InputError
        Shape mismatch or a *_conf kind without cm.
    """
    kind = LossKind(kind)
    y2, p2, w = _flatten(y, y_hat, cm, kind)
    components: Dict[str, float] = {}
    class_dice: Tuple[float, ...] = ()
    if kind.has_ce:
        name = 'ce_conf' if kind.requires_confidence else 'ce'
        components[name] = _weighted_ce(y2, p2, w)
    if kind.has_dice:
        dice, per_class = _soft_dice(y2, p2, smooth)
        components['dice'] = dice
        class_dice = tuple(float(v) for v in per_class)
    return LossValue(
        kind=kind,
        total=float(sum(components.values())),
        components=components,
        class_dice=class_dice,
    )


def loss_gradient(
    kind: LossKind | str,
    logits: np.ndarray,
    y: ProbMap | np.ndarray,
    cm: Optional[ConfidenceMap | np.ndarray] = None,
    smooth: float = DICE_SMOOTH
) -> np.ndarray:
    """Gradient of a loss kind with respect to the logits

    With p = softmax(logits) per voxel:
    CE_conf: (CM_i / m) * (p_ic * sum_c Y_ic - Y_ic)
    dice: quotient rule on the soft-dice ratio, chained through softmax.
    Combined kinds add their component gradients.

    Returns
    -------
    numpy.ndarray
        float64 array shaped like logits.
    """
    kind = LossKind(kind)
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        msg = 'logits must be finite'
        raise InputError(msg)
    y2, z2, w = _flatten(y, logits, cm, kind)
    m, n_classes = y2.shape
    p = softmax(z2, axis=1)
    grad = np.zeros_like(p)
    if kind.has_ce:
        grad += (w / m)[:, None] * (p * y2.sum(axis=1, keepdims=True) - y2)
    if kind.has_dice:
        intersect = (y2 * p).sum(axis=0)
        union = y2.sum(axis=0) + p.sum(axis=0) + smooth
        # d(dice)/d(p_ic)
        g = -(2.0 * y2 * union - (2.0 * intersect + smooth)) / (union ** 2 * n_classes)
        grad += p * (g - (g * p).sum(axis=1, keepdims=True))
    return grad.reshape(logits.shape)


def entropy_map(predictions: Sequence[ProbMap | np.ndarray]) -> np.ndarray:
    """Predictive entropy (nats) of the mean of K predictions

    0 * log 0 is taken as 0.

    Raises
    ------
    InputError
        If no predictions are given or their shapes differ.
    """
    if not predictions:
        msg = 'at least one prediction is required'
        raise InputError(msg)
    arrays = [_as_array(p) for p in predictions]
    if len({a.shape for a in arrays}) != 1:
        msg = 'all predictions must have the same shape'
        raise InputError(msg)
    mean = np.mean(np.stack(arrays), axis=0)
    terms = np.zeros_like(mean)
    positive = mean > 0
    terms[positive] = mean[positive] * np.log(mean[positive])
    return np.maximum(-terms.sum(axis=-1), 0.0)
