"""SGD with Nesterov momentum, the epoch loop, early stopping and rollback-resume."""
from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augmented_stream
from .checkpoint import graph_from_checkpoint, load_checkpoint, save_checkpoint
from .dataset import SampleRecord, normalize
from .errors import EmptyValidation, ShapeMismatch
from .loss import weighted_cce
from .metrics import accuracy, predict_labels
from .model import NetworkGraph, backward, predict_proba

__all__ = [
    "OptimizerConfig",
    "TrainConfig",
    "EpochRecord",
    "TrainState",
    "TrainingData",
    "FitResult",
    "weighted_cce",
    "sgd_step",
    "run_epoch",
    "evaluate_set",
    "fit",
    "resume_from_best",
    "write_history_csv",
]

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.0006
    momentum: float = 0.9
    nesterov: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    patience: int = 15
    resume_epochs: int = 20
    monitor: str = "validation_accuracy"
    early_stopping: bool = True
    resume_early_stopping: bool = True
    # None trains every parameterized layer
    fine_tune_last_n: Optional[int] = 40

    def __post_init__(self):
        if self.epochs < 0 or self.resume_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs/resume_epochs must be >= 0, batch_size and patience >= 1")
        if self.monitor != "validation_accuracy":
            raise ValueError(f"unsupported monitor {self.monitor!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainState:
    epoch: int = 0
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainingData:
    """Everything one epoch needs: uint8 training images plus the fixed validation set."""

    train_records: Sequence[SampleRecord]
    train_images: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_enabled: bool = True
    workers: int = 1


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_checkpoint: Optional[Path]
    state: TrainState
    stopped_early: bool
    stop_epoch: int


def sgd_step(params, grads, velocity, cfg: OptimizerConfig):
    """In-place momentum update of every parameter that has a gradient.

    ``v <- mu * v - lr * g``; Nesterov then applies ``theta <- theta + mu * v - lr * g``,
    plain momentum ``theta <- theta + v``. Parameters absent from ``grads``
    (frozen ones) are left untouched. Missing velocities start at zero.
    """
    lr, mu = cfg.learning_rate, cfg.momentum
    with torch.no_grad():
        for name, g in grads.items():
            theta = params[name]
            if theta.shape != g.shape:
                raise ShapeMismatch(name, theta.shape, g.shape)
            v = velocity.get(name)
            if v is None:
                v = velocity[name] = torch.zeros_like(theta)
            elif v.shape != theta.shape:
                raise ShapeMismatch(f"velocity:{name}", theta.shape, v.shape)
            step = lr * g
            v.mul_(mu).sub_(step)
            if cfg.nesterov:
                theta.add_(mu * v - step)
            else:
                theta.add_(v)
    return params, velocity


def _batches(stream: Iterable, batch_size: int):
    images, labels = [], []
    for img, label in stream:
        images.append(img)
        labels.append(label)
        if len(images) == batch_size:
            yield np.stack(images), np.asarray(labels)
            images, labels = [], []
    if images:
        yield np.stack(images), np.asarray(labels)


def evaluate_set(graph: NetworkGraph, images: np.ndarray, labels, batch_size: int = 32):
    """Inference-mode ``(loss, accuracy, probs)``; the loss is unweighted."""
    if images.dtype == np.uint8:
        images = np.stack([normalize(img) for img in images]) if len(images) else images.astype(np.float32)
    probs = predict_proba(graph, images, batch_size)
    labels = np.asarray(labels)
    loss = float(weighted_cce(torch.from_numpy(probs.astype(np.float64)), labels))
    return loss, accuracy(predict_labels(probs), labels), probs


def run_epoch(
    graph: NetworkGraph,
    stream: Iterable,
    val_set: tuple[np.ndarray, np.ndarray],
    class_weights,
    opt_cfg: OptimizerConfig,
    batch_size: int = 10,
    velocity: Optional[dict[str, torch.Tensor]] = None,
    epoch: int = 0,
) -> EpochRecord:
    """One pass over ``stream`` followed by validation in inference mode.

    The final short batch is trained on. Training loss and accuracy are
    averaged over samples as seen during training (batch statistics).
    """
    val_images, val_labels = val_set
    if len(val_labels) == 0:
        raise EmptyValidation("validation set is empty")
    velocity = {} if velocity is None else velocity
    total_loss, correct, seen = 0.0, 0, 0
    for images, labels in _batches(stream, batch_size):
        loss, probs, grads = backward(graph, images, labels, class_weights)
        sgd_step(graph.params, grads, velocity, opt_cfg)
        total_loss += float(loss) * len(labels)
        correct += int(np.count_nonzero(predict_labels(probs.numpy()) == labels))
        seen += len(labels)
    val_loss, val_acc, _ = evaluate_set(graph, val_images, val_labels)
    return EpochRecord(
        epoch=epoch,
        train_loss=total_loss / seen if seen else math.nan,
        train_accuracy=correct / seen if seen else math.nan,
        val_loss=val_loss,
        val_accuracy=val_acc,
    )


EpochFn = Callable[[NetworkGraph, TrainingData, int, dict, int], EpochRecord]


def default_epoch_fn(class_weights, opt_cfg: OptimizerConfig, train_cfg: TrainConfig) -> EpochFn:
    """Epoch runner over a freshly shuffled, augmented training stream."""

    def run(graph, data: TrainingData, epoch: int, velocity: dict, phase: int) -> EpochRecord:
        # shuffle order shares the augmentation seed
        order_rng = np.random.default_rng(np.random.SeedSequence([data.augment.seed, phase, epoch]))
        order = order_rng.permutation(len(data.train_records))
        aug = data.augment
        if not data.augment_enabled:
            aug = AugmentConfig(0.0, 0.0, 0.0, 0.0, 0.0, seed=aug.seed)
        # phase folds into the augmentation epoch so resumed epochs see new draws
        stream = augmented_stream(
            data.train_records, data.train_images, aug, epoch + 1000 * (phase - 1), data.workers, order=order
        )
        return run_epoch(
            graph,
            stream,
            (data.val_images, data.val_labels),
            class_weights,
            opt_cfg,
            train_cfg.batch_size,
            velocity,
            epoch,
        )

    return run


def _checkpoint_meta(epoch: int, metric: float, phase: int, record: EpochRecord) -> dict:
    return {"epoch": epoch, "phase": phase, "best_val_accuracy": metric, "record": asdict(record)}


def fit(
    graph: NetworkGraph,
    data: Optional[TrainingData],
    train_cfg: TrainConfig,
    opt_cfg: OptimizerConfig,
    class_weights,
    checkpoint_dir: str | Path,
    *,
    epochs: Optional[int] = None,
    epoch_fn: Optional[EpochFn] = None,
    state: Optional[TrainState] = None,
    phase: int = 1,
    early_stopping: Optional[bool] = None,
    checkpoint_name: str = "best.ckpt",
    on_epoch: Optional[Callable[[EpochRecord, TrainState], None]] = None,
) -> FitResult:
    """Train with early stopping on validation accuracy.

    A checkpoint is written whenever validation accuracy strictly exceeds
    the best so far; training stops once ``patience`` epochs pass without
    improvement. ``epoch_fn(graph, data, epoch, velocity, phase)`` may be
    replaced, e.g. by a scripted stub.
    """
    epochs = train_cfg.epochs if epochs is None else epochs
    early_stopping = train_cfg.early_stopping if early_stopping is None else early_stopping
    epoch_fn = epoch_fn or default_epoch_fn(class_weights, opt_cfg, train_cfg)
    state = state or TrainState()
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    best_path: Optional[Path] = None
    stopped_early = False

    for epoch in range(1, epochs + 1):
        record = epoch_fn(graph, data, epoch, state.velocity, phase)
        state.epoch = epoch
        state.history.append(record)
        metric = record.val_accuracy
        if metric > state.best_metric:
            state.best_metric = metric
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            best_path = save_checkpoint(
                graph,
                checkpoint_dir / checkpoint_name,
                _checkpoint_meta(epoch, metric, phase, record),
                velocity=state.velocity,
            )
        else:
            state.epochs_since_improvement += 1
        log.info(
            "phase %d epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
            phase, epoch, record.train_loss, record.train_accuracy, record.val_loss, record.val_accuracy,
        )
        if on_epoch is not None:
            on_epoch(record, state)
        if early_stopping and state.epochs_since_improvement >= train_cfg.patience:
            stopped_early = True
            break

    return FitResult(state.history, best_path, state, stopped_early, state.epoch)


def resume_from_best(
    checkpoint_path: str | Path,
    data: Optional[TrainingData],
    extra_epochs: int,
    opt_cfg: OptimizerConfig,
    class_weights,
    train_cfg: TrainConfig,
    checkpoint_dir: Optional[str | Path] = None,
    *,
    epoch_fn: Optional[EpochFn] = None,
    on_epoch=None,
) -> FitResult:
    """Roll back to a saved best model and train ``extra_epochs`` more.

    Parameters and the freeze mask come from the checkpoint; velocity starts
    at zero. The improvement threshold starts at the checkpoint's best
    validation accuracy, so the returned checkpoint is the best of both
    phases (the input path itself when nothing improves).
    """
    checkpoint_path = Path(checkpoint_path)
    ckpt = load_checkpoint(checkpoint_path)
    graph = graph_from_checkpoint(ckpt)
    best = float(ckpt.meta.get("best_val_accuracy", -math.inf))
    state = TrainState(best_metric=best, best_epoch=0)
    result = fit(
        graph,
        data,
        train_cfg,
        opt_cfg,
        class_weights,
        checkpoint_dir or checkpoint_path.parent,
        epochs=extra_epochs,
        epoch_fn=epoch_fn,
        state=state,
        phase=int(ckpt.meta.get("phase", 1)) + 1,
        early_stopping=train_cfg.resume_early_stopping,
        checkpoint_name="best_resumed.ckpt",
        on_epoch=on_epoch,
    )
    if result.best_checkpoint is None:
        result.best_checkpoint = checkpoint_path
    return result


def write_history_csv(path: str | Path, rows: Iterable[EpochRecord], phases: Optional[Sequence[int]] = None) -> None:
    """History CSV; a ``phase`` column is appended when ``phases`` is given."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*HISTORY_FIELDS, *(["phase"] if phases is not None else [])])
        for i, r in enumerate(rows):
            values = [r.epoch, *(repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:])]
            if phases is not None:
                values.append(phases[i])
            writer.writerow(values)


def read_history_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def copy_checkpoint(src: str | Path, dst: str | Path) -> Path:
    if Path(src).resolve() != Path(dst).resolve():
        shutil.copyfile(src, dst)
    return Path(dst)
