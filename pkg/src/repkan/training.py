"""Optimizer, learning-rate schedule, training loop, and metrics."""

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from . import rng as rng_mod
from .data import MstdDataset, augment
from .errors import ConfigurationError, DimensionError, InputError, NumericError
from .model import RepKanModel


class AdamW:
    """Adam with decoupled weight decay: parameters shrink by
    ``lr * weight_decay`` before the bias-corrected moment update."""

    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ConfigurationError("learning rate must be >= 0")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g.shape != p.value.shape:
                raise DimensionError("gradient shape does not match parameter")
            if self.weight_decay:
                p.value *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class Schedule:
    """Linear warmup to ``base_lr`` followed by cosine annealing to
    ``min_lr`` at the final epoch."""

    base_lr: float = 5e-4
    warmup_epochs: int = 5
    total_epochs: int = 50
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < total_epochs")
        if self.min_lr > self.base_lr:
            raise ConfigurationError("min_lr must not exceed base_lr")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch index.

    Warmup ramps linearly so that epoch ``warmup_epochs`` is the cosine
    start at exactly ``base_lr``; the final epoch lands exactly on
    ``min_lr``.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    span = schedule.total_epochs - schedule.warmup_epochs - 1
    progress = (epoch - schedule.warmup_epochs) / span if span > 0 else 1.0
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    overall_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # (K,K) int, rows = true class, cols = predicted

    def to_dict(self) -> dict:
        return {
            "oa": self.overall_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise DimensionError("labels and predictions must align")
    if labels.size == 0:
        raise InputError("cannot compute metrics on an empty set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes})")
    if predictions.min() < 0 or predictions.max() >= n_classes:
        raise InputError(f"predictions must lie in [0, {n_classes})")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    return conf


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    """Macro-averaged precision/recall/F1 and overall accuracy.

    A class with zero predicted positives contributes precision 0; a class
    with zero true samples contributes recall 0. Macro means are unweighted
    over all classes.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise InputError("empty confusion matrix")
    diag = np.diag(conf).astype(np.float64)
    pred_pos = conf.sum(axis=0).astype(np.float64)
    true_pos = conf.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, pred_pos, out=np.zeros_like(diag), where=pred_pos > 0)
    recall = np.divide(diag, true_pos, out=np.zeros_like(diag), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom,
                   out=np.zeros_like(diag), where=denom > 0)
    return MetricsReport(
        overall_accuracy=float(diag.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=conf,
    )


def evaluate(model: RepKanModel, dataset: MstdDataset,
             batch_size: int = 256) -> MetricsReport:
    """Eval-mode metrics of a model on an (already normalized) dataset."""
    preds = predict_batched(model, dataset.images, batch_size)
    conf = confusion_matrix(dataset.labels, preds, dataset.n_classes)
    return metrics_from_confusion(conf)


def predict_batched(model: RepKanModel, images: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        out[start : start + batch_size] = model.predict(images[start : start + batch_size])
    return out


# ------------------------------------------------------------ training loop


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    crop_pad: int = 4


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_oa: float
    val_macro_p: float
    val_macro_r: float
    val_macro_f1: float


LOG_HEADER = "epoch,lr,train_loss,val_oa,val_macro_p,val_macro_r,val_macro_f1"


def train_log_csv(history) -> str:
    lines = [LOG_HEADER]
    for e in history:
        lines.append(f"{e.epoch},{e.lr!r},{e.train_loss!r},{e.val_oa!r},"
                     f"{e.val_macro_p!r},{e.val_macro_r!r},{e.val_macro_f1!r}")
    return "\n".join(lines) + "\n"


def train_epochs(model: RepKanModel, train_set: MstdDataset,
                 val_set: MstdDataset | None, config: TrainConfig):
    """Mini-batch training, deterministic for a given seed.

    Datasets must already be normalized. Returns the per-epoch history;
    the caller owns checkpointing.
    """
    n = len(train_set)
    if n == 0:
        raise InputError("training set is empty")
    if config.epochs == 0:
        return []
    batch_size = min(config.batch_size, n)
    if batch_size < 2:
        raise ConfigurationError("batch size must be at least 2 (batch norm)")
    # short runs: shrink warmup so the schedule stays valid
    warmup = min(config.warmup_epochs, config.epochs - 1)
    schedule = Schedule(base_lr=config.lr, warmup_epochs=warmup,
                        total_epochs=config.epochs, min_lr=min(config.min_lr, config.lr))
    optimizer = AdamW(model.parameters(), lr=config.lr,
                      weight_decay=config.weight_decay)
    history = []
    for epoch in range(config.epochs):
        lr = lr_at(schedule, epoch)
        order = rng_mod.epoch_stream(config.seed, rng_mod.STREAM_SHUFFLE, epoch).permutation(n)
        aug_rng = rng_mod.epoch_stream(config.seed, rng_mod.STREAM_AUGMENT, epoch)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue  # batch norm needs at least two samples
            images = train_set.images[idx]
            if config.augment:
                images = augment(images, aug_rng, flip_prob=config.flip_prob,
                                 pad=config.crop_pad)
            labels = train_set.labels[idx]
            logits, cache = model.forward(images, bn_mode="train", need_grad=True)
            loss, grad = ops.softmax_cross_entropy(logits, labels)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}; "
                    "lower the learning rate or check the data")
            model.zero_grad()
            model.backward(grad, cache)
            optimizer.step(lr)
            losses.append(loss)
        if val_set is not None and len(val_set):
            report = evaluate(model, val_set)
            val = (report.overall_accuracy, report.macro_precision,
                   report.macro_recall, report.macro_f1)
        else:
            val = (math.nan,) * 4
        history.append(EpochLog(epoch, lr, float(np.mean(losses)), *val))
    return history
