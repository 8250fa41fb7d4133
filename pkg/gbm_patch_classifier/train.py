"""
Loss, optimisation and the epoch loop.

A `Trainer` owns one model instance exclusively. Several trainers (one per cross-validation
fold, say) may run at the same time as long as each has its own parameters.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import Dict, List, MutableMapping, Sequence, Tuple

import numpy as np

from . import model as M
from . import tensor as T
from .data import NUM_CLASSES, NormalizationStats, PatchDataset, class_weights, compute_norm_stats, normalize
from .exceptions import ConfigError, ShapeError, TrainingError
from .file_handler import FileHandler
from .logger import Logger
from .utils import argmax_lowest, derive_rng, format_float, slice_iterable


@dataclass
class TrainConfig:
    """
    #### Optimisation settings.

    @attr int `patience`: epochs without validation-loss improvement before training stops.
    An epoch improves when its validation loss is below the best so far minus `min_delta`.
    """
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    min_delta: float = 1e-6
    seed: int = 0
    use_class_weights: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigError(f"{name} must lie strictly between 0 and 1, got {value}")
        if not self.adam_epsilon > 0:
            raise ConfigError(f"adam_epsilon must be positive, got {self.adam_epsilon}")
        # batch statistics are undefined for a single sample
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta cannot be negative, got {self.min_delta}")
        if self.seed < 0:
            raise ConfigError(f"seed cannot be negative, got {self.seed}")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def weighted_cross_entropy(
        logits: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray | None = None
    ) -> Tuple[float, np.ndarray]:
    '''
    Weighted-mean cross-entropy and its gradient with respect to the logits.

    loss = sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]

    Args:
        logits (np.ndarray): N x K scores.
        labels (np.ndarray): N integer labels in 0..K-1.
        weights (np.ndarray | None): K positive class weights; unit weights when None.
    '''
    if logits.ndim != 2:
        raise ShapeError(f"logits: expected rank 2, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if n == 0:
        raise ValueError("cannot compute a loss over zero samples")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in 0..{k - 1}")
    weights = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeError(f"weights: expected shape ({k},), got {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("class weights must be positive")

    log_probs = T.log_softmax(logits)
    rows = np.arange(n)
    sample_weights = weights[labels]
    total_weight = sample_weights.sum()
    loss = float(np.sum(sample_weights * -log_probs[rows, labels]) / total_weight)

    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad *= (sample_weights / total_weight)[:, None]
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0

    @classmethod
    def fresh(cls, params: MutableMapping[str, np.ndarray], names: Sequence[str] | None = None) -> "AdamState":
        names = list(params.keys()) if names is None else list(names)
        return cls(
            m=OrderedDict((name, np.zeros_like(params[name])) for name in names),
            v=OrderedDict((name, np.zeros_like(params[name])) for name in names),
        )


def adam_step(
        params: MutableMapping[str, np.ndarray],
        grads: Dict[str, np.ndarray],
        state: AdamState,
        config: TrainConfig
    ) -> Tuple[MutableMapping[str, np.ndarray], AdamState]:
    '''
    One bias-corrected Adam update, applied in place.

    A parameter whose gradient is zero everywhere is left as it is, moments included, so a
    zero gradient never moves a parameter. Textbook Adam would instead decay the moments and
    keep stepping along them. The step counter `t` advances either way.
    '''
    if list(grads) != list(state.m):
        raise ShapeError("gradient names do not match the optimiser state")
    for name, g in grads.items():
        if g.shape != state.m[name].shape or g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match parameter shape {params[name].shape}")

    state.t += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if not np.any(g):
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        param = params[name]
        param -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)).astype(param.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    best_loss: float = math.inf
    best_params: M.ModelParams | None = None
    best_epoch: int = 0
    epochs_since_improvement: int = 0

    def update(self, val_loss: float, params: M.ModelParams, epoch: int, min_delta: float) -> bool:
        '''Records an epoch's validation loss. Returns True when it counts as an improvement.'''
        if val_loss < self.best_loss - min_delta:
            self.best_loss = val_loss
            self.best_params = params.copy()
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    def should_stop(self, patience: int) -> bool:
        return self.epochs_since_improvement >= patience


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class FitResult:
    params: M.ModelParams
    history: List[HistoryRow] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = "max_epochs"


def write_history(path: str, history: Sequence[HistoryRow]) -> None:
    '''CSV `epoch,train_loss,val_loss` with round-trippable floats.'''
    rows = [["epoch", "train_loss", "val_loss"]]
    rows.extend([str(row.epoch), format_float(row.train_loss), format_float(row.val_loss)] for row in history)
    FileHandler(path).write_to_file(rows)


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    '''
    Index batches for one epoch, shuffled from (seed, epoch).

    The last batch may be smaller; a trailing batch of one sample joins the batch before it
    because batch statistics need at least two samples.
    '''
    if n < 1:
        raise TrainingError("cannot iterate over an empty dataset")
    order = derive_rng(seed, "shuffle", epoch).permutation(n)
    batches = slice_iterable(order, batch_size)
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """
    #### Trains one model with weighted cross-entropy, Adam and early stopping.

    #### Parameters:
    @param ModelParams `params`: the model to train. Updated in place.

    @param TrainConfig `config`: optimisation settings.

    @param np.ndarray `weights`: class weights for the loss, unit weights when None.

    @param Logger `logger`: optional Logger for progress messages.

    @param bool `log_to_console`: print progress when no logger is set.

    #### Attributes:
    @attr AdamState `optimizer`: moments for every trainable parameter.
    """

    def __init__(
            self,
            params: M.ModelParams,
            config: TrainConfig,
            weights: np.ndarray | None = None,
            logger: Logger | None = None,
            log_to_console: bool = False,
            name: str = "trainer"
        ) -> None:
        config.validate()
        self.params = params
        self.config = config
        self.weights = np.ones(params.config.num_classes) if weights is None else np.asarray(weights, dtype=np.float64)
        self.optimizer = AdamState.fresh(params, params.trainable_names())
        self.logger = logger
        self.log_to_console = log_to_console
        self.name = name

    def log(self, msg: str, level: str | None = None) -> None:
        '''
        Logs a message using `self.logger` or prints it out if `self.logger` is None.

        Args:
            msg (str): The message to log
            level (str | None): The level of message to log.
        '''
        if self.logger and isinstance(self.logger, Logger):
            return self.logger.log(msg, level or "INFO")
        elif self.logger:
            raise TypeError("Invalid type for `self.logger`. `self.logger` should be an instance of gbm_patch_classifier.logger.Logger")
        if self.log_to_console:
            print(msg)
        return None

    def train_epoch(self, images: np.ndarray, labels: np.ndarray, epoch: int) -> float:
        '''
        One pass over seeded-shuffled batches with one Adam step per batch.

        Returns the sample-weighted mean batch loss.
        '''
        n = len(images)
        if n == 0:
            raise TrainingError("training set is empty")
        if n < 2:
            raise TrainingError("training needs at least two samples for batch statistics")
        total = 0.0
        for batch_no, batch in enumerate(iterate_batches(n, self.config.batch_size, self.config.seed, epoch), start=1):
            logits, cache = M.forward(self.params, images[batch], "training")
            loss, grad_logits = weighted_cross_entropy(logits, labels[batch], self.weights)
            if not math.isfinite(loss):
                raise TrainingError(f"{self.name}: non-finite training loss at epoch {epoch}, batch {batch_no}")
            grads = M.backward(cache, grad_logits)
            adam_step(self.params, grads, self.optimizer, self.config)
            total += loss * len(batch)
        return total / n

    def logits(self, images: np.ndarray) -> np.ndarray:
        '''Inference-mode logits, computed batch by batch.'''
        if len(images) == 0:
            return np.zeros((0, self.params.config.num_classes), dtype=self.params.dtype)
        chunks = [M.forward(self.params, images[batch], "inference")[0] for batch in slice_iterable(np.arange(len(images)), self.config.batch_size)]
        return np.concatenate(chunks)

    def validation_loss(self, images: np.ndarray, labels: np.ndarray) -> float:
        '''Weighted-mean loss over the whole validation set, in inference mode.'''
        if len(images) == 0:
            raise TrainingError("validation set is empty")
        loss, _ = weighted_cross_entropy(self.logits(images), labels, self.weights)
        if not math.isfinite(loss):
            raise TrainingError(f"{self.name}: non-finite validation loss")
        return loss

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return T.softmax(self.logits(images))

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        return argmax_lowest(self.logits(images))

    def fit(
            self,
            train_images: np.ndarray,
            train_labels: np.ndarray,
            val_images: np.ndarray,
            val_labels: np.ndarray
        ) -> FitResult:
        '''
        Trains until `max_epochs` or until `patience` epochs pass without improvement,
        then restores and returns the parameters with the best validation loss.
        '''
        if len(val_images) == 0:
            raise TrainingError("validation set is empty")
        if len(train_images) == 0:
            raise TrainingError("training set is empty")

        stop = EarlyStopState()
        history: List[HistoryRow] = []
        stop_reason = "max_epochs"
        self.log(f"{self.name.upper()}: TRAINING ON {len(train_images)} SAMPLES, VALIDATING ON {len(val_images)}...")
        for epoch in range(1, self.config.max_epochs + 1):
            train_loss = self.train_epoch(train_images, train_labels, epoch)
            val_loss = self.validation_loss(val_images, val_labels)
            history.append(HistoryRow(epoch, train_loss, val_loss))
            improved = stop.update(val_loss, self.params, epoch, self.config.min_delta)
            self.log(
                f"EPOCH {epoch}/{self.config.max_epochs}: train loss {train_loss:.6f}, "
                f"val loss {val_loss:.6f}{' *' if improved else ''}",
                level="DEBUG"
            )
            if stop.should_stop(self.config.patience):
                stop_reason = "early_stopping"
                self.log(f"{self.name.upper()}: NO IMPROVEMENT FOR {stop.epochs_since_improvement} EPOCHS. STOPPING AT EPOCH {epoch}")
                break

        self.params = stop.best_params
        self.log(f"{self.name.upper()}: BEST VAL LOSS {stop.best_loss:.6f} AT EPOCH {stop.best_epoch}")
        return FitResult(
            params=stop.best_params,
            history=history,
            best_epoch=stop.best_epoch,
            epochs_run=len(history),
            best_val_loss=stop.best_loss,
            stop_reason=stop_reason,
        )


# ---------------------------------------------------------------------------
# Split-level helper shared by the train and cross-validate commands
# ---------------------------------------------------------------------------

@dataclass
class SplitRun:
    result: FitResult
    stats: NormalizationStats
    weights: np.ndarray
    train_indices: np.ndarray
    val_indices: np.ndarray


def train_on_split(
        dataset: PatchDataset,
        train_indices: np.ndarray,
        val_indices: np.ndarray,
        architecture: M.ArchitectureConfig,
        config: TrainConfig,
        assume_bgr: bool = False,
        logger: Logger | None = None,
        log_to_console: bool = False,
        name: str = "trainer"
    ) -> SplitRun:
    '''
    Normalisation stats from the training portion, class weights from its counts, a freshly
    built model, then `Trainer.fit`.
    '''
    if len(train_indices) == 0 or len(val_indices) == 0:
        raise TrainingError("both the training and the validation portion need samples")
    unit = dataset.unit_images(assume_bgr)
    labels = dataset.labels
    stats = compute_norm_stats([unit[train_indices]])
    images = normalize(unit, stats)

    if config.use_class_weights:
        weights = class_weights(np.bincount(labels[train_indices], minlength=NUM_CLASSES))
    else:
        weights = np.ones(NUM_CLASSES)
    params = M.build(architecture, config.seed)
    trainer = Trainer(params, config, weights, logger=logger, log_to_console=log_to_console, name=name)
    result = trainer.fit(images[train_indices], labels[train_indices], images[val_indices], labels[val_indices])
    return SplitRun(result, stats, weights, np.asarray(train_indices), np.asarray(val_indices))
