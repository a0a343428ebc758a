"""Desk-scale pixel classifier and the channel-mode x loss configuration study

The classifier maps per-pixel features (intensity, depth, 3x3 local mean
and optionally the confidence value), standardized with the training
image's statistics, through 16 tanh units to a C-way softmax, trained by
minibatch SGD with hand-derived gradients.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import StrEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from scipy.special import softmax

from .confidence import ConfidenceMap, RwParams, compute_confidence_map, depth_profile
from .exceptions import InputError, TrainingDivergedError
from .grids import Image2D, LabelMap, ProbMap, argmax_labels, one_hot_encode
from .losses import LossKind, entropy_map, loss_gradient, loss_value
from .metrics import (
    MetricsReport, MetricsRow, aggregate_report, count_islands, evaluate_case,
    friedman_test,
)
from .phantom import PhantomSpec, generate_phantom

logger = logging.getLogger(__name__)

HIDDEN_UNITS = 16


class ChannelMode(StrEnum):
    ONE = '1ch'
    TWO = '2ch'


class TrainConfig(BaseModel):
    """Training hyperparameters and the configuration axes

    Attributes
    ----------
    lr : float
        SGD learning rate.
    epochs : int
    batch : int
        Minibatch size.
    seed : int
        Seeds weight init and per-epoch shuffling.
    kind : LossKind
    mode : ChannelMode
        1ch uses image features only, 2ch appends the confidence map.
    """
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=0.1, gt=0.0)
    epochs: int = Field(default=200, ge=1)
    batch: int = Field(default=256, ge=1)
    seed: int = Field(default=0, ge=0)
    kind: LossKind = LossKind.CE
    mode: ChannelMode = ChannelMode.ONE

    @property
    def name(self) -> str:
        return f'{self.mode.value}-{self.kind.value}'


class ToyModel(BaseModel):
    """Weights of the F -> 16 tanh -> C softmax classifier

    weights is the flat concatenation W1 (F x 16), b1 (16), W2 (16 x C),
    b2 (C). Inputs are standardized as (x - feature_mean) / feature_scale
    before the first layer; both default to the identity.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_features: int = Field(ge=1)
    n_classes: int = Field(ge=2)
    weights: np.ndarray
    config: TrainConfig
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None

    @staticmethod
    def weight_count(n_features: int, n_classes: int) -> int:
        return n_features * HIDDEN_UNITS + HIDDEN_UNITS + HIDDEN_UNITS * n_classes + n_classes

    @model_validator(mode='after')
    def _check_weights(self) -> 'ToyModel':
        expected = self.weight_count(self.n_features, self.n_classes)
        if self.weights.shape != (expected,):
            msg = f'expected {expected} weights, got shape {self.weights.shape}'
            raise ValueError(msg)
        for name in ('feature_mean', 'feature_scale'):
            stat = getattr(self, name)
            if stat is not None and stat.shape != (self.n_features,):
                msg = f'{name} must have shape ({self.n_features},), got {stat.shape}'
                raise ValueError(msg)
        return self

    def unpack(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return _unpack(self.weights, self.n_features, self.n_classes)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.feature_mean is not None:
            x = x - self.feature_mean
        if self.feature_scale is not None:
            x = x / self.feature_scale
        return x


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def extract_features(
    img: Image2D,
    cm: Optional[ConfidenceMap] = None,
    mode: ChannelMode | str = ChannelMode.ONE
) -> np.ndarray:
    """Per-pixel features of shape (H, W, F)

    1ch: intensity, normalized depth, 3x3 local mean (F = 3).
    2ch: the same plus the confidence value (F = 4).

    Raises
    ------
    InputError
        If mode is 2ch and cm is missing or mis-sized.
    """
    mode = ChannelMode(mode)
    g = img.data.astype(np.float64)
    depth = np.broadcast_to(img.depth()[:, None], g.shape)
    local_mean = ndimage.uniform_filter(g, size=3, mode='nearest')
    channels = [g, depth, local_mean]
    if mode is ChannelMode.TWO:
        if cm is None:
            msg = '2ch features require a confidence map'
            raise InputError(msg)
        if cm.data.shape != g.shape:
            msg = f'confidence map shape {cm.data.shape} does not match image {g.shape}'
            raise InputError(msg)
        channels.append(cm.data.astype(np.float64))
    return np.stack(channels, axis=-1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _unpack(
    weights: np.ndarray, n_features: int, n_classes: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    h = HIDDEN_UNITS
    i = n_features * h
    w1 = weights[:i].reshape(n_features, h)
    b1 = weights[i:i + h]
    i += h
    w2 = weights[i:i + h * n_classes].reshape(h, n_classes)
    b2 = weights[i + h * n_classes:]
    return w1, b1, w2, b2


def _init_weights(n_features: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    weights = np.zeros(ToyModel.weight_count(n_features, n_classes), dtype=np.float64)
    w1, _, w2, _ = _unpack(weights, n_features, n_classes)
    w1[...] = rng.standard_normal(w1.shape) / np.sqrt(n_features)
    w2[...] = rng.standard_normal(w2.shape) / np.sqrt(HIDDEN_UNITS)
    return weights


def _forward(
    weights: np.ndarray, x: np.ndarray, n_classes: int
) -> Tuple[np.ndarray, np.ndarray]:
    w1, b1, w2, b2 = _unpack(weights, x.shape[1], n_classes)
    hidden = np.tanh(x @ w1 + b1)
    return hidden, hidden @ w2 + b2


def _backward(
    weights: np.ndarray,
    x: np.ndarray,
    hidden: np.ndarray,
    grad_logits: np.ndarray,
    n_classes: int
) -> np.ndarray:
    _, _, w2, _ = _unpack(weights, x.shape[1], n_classes)
    grad = np.zeros_like(weights)
    g_w1, g_b1, g_w2, g_b2 = _unpack(grad, x.shape[1], n_classes)
    g_w2[...] = hidden.T @ grad_logits
    g_b2[...] = grad_logits.sum(axis=0)
    g_pre = (grad_logits @ w2.T) * (1.0 - hidden ** 2)
    g_w1[...] = x.T @ g_pre
    g_b1[...] = g_pre.sum(axis=0)
    return grad


def _flat(
    features: np.ndarray,
    labels: LabelMap,
    cm: Optional[ConfidenceMap | np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_features = features.shape[-1]
    x = np.asarray(features, dtype=np.float64).reshape(-1, n_features)
    y = one_hot_encode(labels).data.reshape(-1, labels.num_classes).astype(np.float64)
    if x.shape[0] != y.shape[0]:
        msg = f'features cover {x.shape[0]} pixels but labels cover {y.shape[0]}'
        raise InputError(msg)
    if cm is None:
        w = np.ones(x.shape[0], dtype=np.float64)
    else:
        cm_arr = cm.data if isinstance(cm, ConfidenceMap) else np.asarray(cm)
        if cm_arr.size != x.shape[0]:
            msg = 'confidence map does not match the feature grid'
            raise InputError(msg)
        w = cm_arr.reshape(-1).astype(np.float64)
    return x, y, w


def _feature_stats(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    # constant features (e.g. a flat confidence map) are only centred
    scale[scale < 1e-12] = 1.0
    return mean, scale


def train_toy(
    features: np.ndarray,
    labels: LabelMap,
    cm: Optional[ConfidenceMap | np.ndarray],
    kind: LossKind | str,
    config: Optional[TrainConfig] = None
) -> Tuple[ToyModel, List[float]]:
    """Fit the pixel classifier by minibatch SGD

    Features are standardized with their mean and standard deviation over
    the training pixels; the model keeps both for predict.

    Parameters
    ----------
    features : numpy.ndarray
        (H, W, F) from extract_features.
    labels : LabelMap
        (Noisy) training labels.
    cm : ConfidenceMap | numpy.ndarray (optional)
        Loss weights for *_conf kinds.
    kind : LossKind | str
        Loss to minimize; overrides config.kind.
    config : TrainConfig (optional)

    Returns
    -------
    Tuple[ToyModel, List[float]]
        The model and the loss history: entry 0 is the loss before
        training, entry e the full-data loss after epoch e.

    Raises
    ------
    InputError
        Inconsistent dims, or a *_conf kind without cm.
    TrainingDivergedError
        If the loss becomes non-finite.
    """
    kind = LossKind(kind)
    config = (config or TrainConfig()).model_copy(update={'kind': kind})
    if kind.requires_confidence and cm is None:
        msg = f'loss kind {kind.value} requires a confidence map'
        raise InputError(msg)
    x, y, w = _flat(features, labels, cm)
    feature_mean, feature_scale = _feature_stats(x)
    x = (x - feature_mean) / feature_scale
    n_classes = labels.num_classes
    rng = np.random.default_rng(config.seed)
    weights = _init_weights(x.shape[1], n_classes, rng)

    def _full_loss() -> float:
        _, logits = _forward(weights, x, n_classes)
        return loss_value(kind, y, softmax(logits, axis=1), w).total

    history = [_full_loss()]
    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, order.size, config.batch):
            idx = order[start:start + config.batch]
            xb = x[idx]
            hidden, logits = _forward(weights, xb, n_classes)
            grad_logits = loss_gradient(kind, logits, y[idx], w[idx])
            weights -= config.lr * _backward(weights, xb, hidden, grad_logits, n_classes)
        history.append(_full_loss())
        if not np.isfinite(history[-1]):
            msg = f'training diverged at epoch {epoch + 1}'
            raise TrainingDivergedError(msg, history)
    logger.debug(
        'trained %s seed=%d: loss %.4f -> %.4f',
        config.name, config.seed, history[0], history[-1]
    )
    model = ToyModel(
        n_features=x.shape[1],
        n_classes=n_classes,
        weights=weights,
        config=config,
        feature_mean=feature_mean,
        feature_scale=feature_scale,
    )
    return model, history


def predict(model: ToyModel, features: np.ndarray) -> ProbMap:
    """Per-pixel softmax probabilities of shape (H, W, C)

    Raises
    ------
    InputError
        If the feature count differs from the model's.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != model.n_features:
        msg = f'model expects {model.n_features} features, got {features.shape[-1]}'
        raise InputError(msg)
    x = model.standardize(features.reshape(-1, model.n_features))
    _, logits = _forward(model.weights, x, model.n_classes)
    probs = softmax(logits, axis=1).reshape(features.shape[:-1] + (model.n_classes,))
    return ProbMap(data=probs, normalized=True)


# ---------------------------------------------------------------------------
# Configuration study
# ---------------------------------------------------------------------------

CONFIGURATIONS: Dict[str, Tuple[ChannelMode, LossKind]] = {
    # baselines
    '1ch-dice': (ChannelMode.ONE, LossKind.DICE),
    '1ch-ce': (ChannelMode.ONE, LossKind.CE),
    '1ch-dice_ce': (ChannelMode.ONE, LossKind.DICE_CE),
    # confidence as a second channel
    '2ch-dice': (ChannelMode.TWO, LossKind.DICE),
    '2ch-ce': (ChannelMode.TWO, LossKind.CE),
    '2ch-dice_ce': (ChannelMode.TWO, LossKind.DICE_CE),
    # confidence in the loss
    '1ch-ce_conf': (ChannelMode.ONE, LossKind.CE_CONF),
    '1ch-dice_ce_conf': (ChannelMode.ONE, LossKind.DICE_CE_CONF),
    # both
    '2ch-ce_conf': (ChannelMode.TWO, LossKind.CE_CONF),
    '2ch-dice_ce_conf': (ChannelMode.TWO, LossKind.DICE_CE_CONF),
}

HEADLINE_CONFIGURATIONS = ('1ch-ce', '2ch-dice', '1ch-ce_conf')


class RunResult(BaseModel):
    """One (configuration, seed) training run"""
    model_config = ConfigDict(frozen=True)

    configuration: str
    seed: int
    loss_history: List[float]
    rows: List[MetricsRow]
    islands: int
    pixel_accuracy: float


class ConfigurationSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    configuration: str
    report: MetricsReport
    island_counts: List[int]
    median_islands: float
    mean_final_loss: float


class FriedmanSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric: str
    configurations: List[str]
    n_subjects: int
    chi2: float
    dof: int
    p: float


class EnsembleEntropy(BaseModel):
    """Predictive entropy over models trained with different seeds"""
    model_config = ConfigDict(frozen=True)

    configuration: str
    members: int
    mean_entropy: float
    depth_profile: List[float]


class StudyReport(BaseModel):
    """Everything the train-toy pipeline writes to JSON"""
    model_config = ConfigDict(frozen=True)

    phantom: PhantomSpec
    train: TrainConfig
    rw_params: RwParams
    seeds: List[int]
    runs: List[RunResult]
    summaries: List[ConfigurationSummary]
    friedman: Optional[FriedmanSummary] = None
    entropy: List[EnsembleEntropy] = []


def _prepare(
    spec: PhantomSpec, rw_params: RwParams
) -> Tuple[Image2D, LabelMap, LabelMap, ConfidenceMap]:
    img, clean, noisy = generate_phantom(spec)
    # confidence of the despeckled image
    despeckled = Image2D(
        data=ndimage.uniform_filter(img.data, size=3, mode='nearest'), spacing=img.spacing
    )
    cm, _ = compute_confidence_map(despeckled, rw_params)
    return img, clean, noisy, cm


def run_configuration(
    configuration: str,
    spec: PhantomSpec,
    train: TrainConfig,
    rw_params: RwParams
) -> RunResult:
    """Train one configuration on the phantom of spec.seed and evaluate
    its prediction against the clean labels

    The confidence map is computed from the 3x3 mean-filtered phantom.
    """
    if configuration not in CONFIGURATIONS:
        msg = f'{configuration} is not a known configuration'
        raise InputError(msg)
    mode, kind = CONFIGURATIONS[configuration]
    img, clean, noisy, cm = _prepare(spec, rw_params)
    features = extract_features(img, cm, mode)
    config = train.model_copy(update={'mode': mode, 'kind': kind, 'seed': spec.seed})
    model, history = train_toy(features, noisy, cm, kind, config)
    pred = argmax_labels(predict(model, features))
    pred = LabelMap(data=pred.data, num_classes=clean.num_classes)
    rows = evaluate_case(pred, clean, subject=f'seed{spec.seed}')
    islands = sum(
        count_islands(pred.data == c).islands for c in range(1, clean.num_classes)
    )
    accuracy = float(np.mean(pred.data == clean.data))
    return RunResult(
        configuration=configuration,
        seed=spec.seed,
        loss_history=history,
        rows=rows,
        islands=islands,
        pixel_accuracy=accuracy,
    )


def ensemble_entropy(
    configuration: str,
    spec: PhantomSpec,
    train: TrainConfig,
    rw_params: RwParams,
    members: int
) -> EnsembleEntropy:
    """Entropy of predictions from `members` models that differ only in
    their training seed, on the single phantom of spec.seed"""
    if members < 1:
        msg = f'members must be >= 1, got {members}'
        raise InputError(msg)
    mode, kind = CONFIGURATIONS[configuration]
    img, _, noisy, cm = _prepare(spec, rw_params)
    features = extract_features(img, cm, mode)
    predictions = []
    for member in range(members):
        config = train.model_copy(update={'mode': mode, 'kind': kind, 'seed': member})
        model, _ = train_toy(features, noisy, cm, kind, config)
        predictions.append(predict(model, features))
    entropy = entropy_map(predictions)
    return EnsembleEntropy(
        configuration=configuration,
        members=members,
        mean_entropy=float(entropy.mean()),
        depth_profile=[float(v) for v in depth_profile(entropy)],
    )


def run_study(
    configurations: Sequence[str] = HEADLINE_CONFIGURATIONS,
    seeds: Sequence[int] = tuple(range(20)),
    spec: Optional[PhantomSpec] = None,
    train: Optional[TrainConfig] = None,
    rw_params: Optional[RwParams] = None,
    workers: int = 1,
    entropy_members: int = 0
) -> StudyReport:
    """Train every configuration on every seed's phantom and summarize

    The Friedman test compares configurations on the per-seed mean
    Hausdorff distance; seeds where some configuration has an undefined HD
    are dropped from the test.

    Parameters
    ----------
    configurations : Sequence[str]
        Names from CONFIGURATIONS.
    seeds : Sequence[int]
        Phantom and training seeds.
    spec : PhantomSpec (optional)
        Template; its seed is replaced by each study seed.
    train : TrainConfig (optional)
        Hyperparameters; mode and kind come from each configuration.
    rw_params : RwParams (optional)
        Confidence map parameters.
    workers : int
        Parallel runs. Results do not depend on this value.
    entropy_members : int
        When > 0, also report ensemble entropy for the 1ch-dice and
        2ch-dice configurations.
    """
    spec = spec or PhantomSpec()
    train = train or TrainConfig()
    rw_params = rw_params or RwParams()
    unknown = [c for c in configurations if c not in CONFIGURATIONS]
    if unknown:
        msg = f'unknown configurations: {", ".join(unknown)}'
        raise InputError(msg)
    if not seeds:
        msg = 'at least one seed is required'
        raise InputError(msg)
    jobs = [(c, s) for c in configurations for s in seeds]

    def _run(job: Tuple[str, int]) -> RunResult:
        configuration, seed = job
        return run_configuration(
            configuration, spec.model_copy(update={'seed': seed}), train, rw_params
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run, jobs))
    else:
        runs = [_run(job) for job in jobs]

    summaries = []
    for configuration in configurations:
        mine = [r for r in runs if r.configuration == configuration]
        rows = [row for r in mine for row in r.rows]
        islands = [r.islands for r in mine]
        summaries.append(ConfigurationSummary(
            configuration=configuration,
            report=aggregate_report(rows),
            island_counts=islands,
            median_islands=float(np.median(islands)),
            mean_final_loss=float(np.mean([r.loss_history[-1] for r in mine])),
        ))
        logger.info(
            '%s: median islands %.1f over %d seeds',
            configuration, summaries[-1].median_islands, len(mine)
        )

    friedman = _friedman_on_hd(runs, list(configurations), list(seeds))

    entropy = []
    if entropy_members > 0:
        for configuration in ('1ch-dice', '2ch-dice'):
            entropy.append(ensemble_entropy(
                configuration, spec, train, rw_params, entropy_members
            ))

    return StudyReport(
        phantom=spec,
        train=train,
        rw_params=rw_params,
        seeds=list(seeds),
        runs=runs,
        summaries=summaries,
        friedman=friedman,
        entropy=entropy,
    )


def _friedman_on_hd(
    runs: List[RunResult],
    configurations: List[str],
    seeds: List[int]
) -> Optional[FriedmanSummary]:
    if len(configurations) < 2:
        return None
    by_key = {(r.configuration, r.seed): r for r in runs}
    table = []
    for seed in seeds:
        row = []
        for configuration in configurations:
            hds = [m.hd_mm for m in by_key[(configuration, seed)].rows]
            row.append(np.nan if any(h is None for h in hds) else float(np.mean(hds)))
        if np.all(np.isfinite(row)):
            table.append(row)
    if len(table) < 2:
        return None
    result = friedman_test(np.asarray(table))
    return FriedmanSummary(
        metric='hd_mm',
        configurations=configurations,
        n_subjects=len(table),
        chi2=result.chi2,
        dof=result.dof,
        p=result.p,
    )
