"""SGD training and evaluation of a `Network` on a `LabeledSet`."""

from __future__ import annotations

__all__ = [
    "EpochRecord",
    "EvalResult",
    "History",
    "LRSchedule",
    "StepRecord",
    "TrainConfig",
    "evaluate",
    "sgd_step",
    "train",
    "write_history_csv",
]

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from exnorm.data import LabeledSet
from exnorm.network import Network
from exnorm.ratios import RatioRecord, record_ratios
from exnorm.tensor import Tensor, backward, softmax_cross_entropy
from exnorm.types import (
    EmptyDatasetError,
    ExportError,
    NonFiniteError,
    NormalizerConfigError,
    TrainingDivergedError,
)

EVAL_BATCH = 256

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup from 0, then stepwise decay.

    Epochs are counted from 0.  During the first ``warmup_epochs`` epochs,
    global step t gets ``lr * t / (warmup_epochs * steps_per_epoch)``.
    Afterwards the rate is ``lr * factor ** d`` where d is the number of
    ``decay_epochs`` that are not after the current epoch.
    """

    lr: float = 0.1
    decay_epochs: Tuple[int, ...] = ()
    factor: float = 0.1
    warmup_epochs: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        if self.lr < 0:
            raise ValueError(f"Learning rate must not be negative: {self.lr}")
        if self.warmup_epochs < 0:
            raise ValueError("Warmup epochs must not be negative")

    def lr_at(self, epoch: int, step: int, steps_per_epoch: int) -> float:
        if epoch < self.warmup_epochs:
            t = epoch * steps_per_epoch + step
            return self.lr * t / (self.warmup_epochs * steps_per_epoch)
        decays = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * self.factor**decays


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    record_ratios: bool = False
    """Record training-set ratios in inference mode after every epoch."""

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(
                f"epochs and batch size must be positive, got "
                f"{self.epochs} and {self.batch_size}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"Momentum must be in [0, 1): {self.momentum}")


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    split: str
    loss: float
    top1: float


@dataclass(frozen=True)
class EvalResult:
    loss: float
    top1: float


@dataclass
class History:
    """Per-step and per-epoch metrics of one run.  Epochs count from 1."""

    steps: List[StepRecord] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)
    ratios: List[RatioRecord] = field(default_factory=list)

    def split(self, name: str) -> List[EpochRecord]:
        return [e for e in self.epochs if e.split == name]

    @property
    def initial_loss(self) -> float:
        """Training loss of the first epoch."""
        return self.split("train")[0].loss

    @property
    def final_loss(self) -> float:
        return self.split("train")[-1].loss


def sgd_step(
    params: Sequence[Tensor],
    grads: Mapping[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> Dict[str, np.ndarray]:
    """Classic momentum SGD, in place.

    ``v <- momentum * v + g + weight_decay * p`` then ``p <- p - lr * v``.
    Parameters without a gradient are treated as having a zero gradient.
    No parameter is touched when any gradient is non-finite.
    """
    bad = [
        str(p.name)
        for p in params
        if p.name in grads and not np.all(np.isfinite(grads[str(p.name)]))
    ]
    if bad:
        raise NonFiniteError(f"Non-finite gradients for {', '.join(bad)}")

    for p in params:
        name = str(p.name)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} for {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * velocity[name]).astype(p.dtype, copy=False)
    return velocity


def _uses_bn(model: Network) -> bool:
    return any(
        kind.is_batch for layer in model.norm_layers() for kind in layer.pool
    )


def evaluate(
    model: Network, data: LabeledSet, batch_size: int = EVAL_BATCH
) -> EvalResult:
    """Mean cross-entropy and top-1 accuracy in inference mode."""
    if len(data) == 0:
        raise EmptyDatasetError("Cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for _, images, labels in data.batches(batch_size):
        logits = model.forward(Tensor(images), training=False)
        loss = softmax_cross_entropy(logits, labels).item()
        total_loss += loss * len(labels)
        correct += int(np.sum(logits.data.argmax(axis=1) == labels))
    return EvalResult(total_loss / len(data), correct / len(data))


def train(
    model: Network,
    data: LabeledSet,
    cfg: TrainConfig,
    eval_data: Optional[LabeledSet] = None,
) -> History:
    """Train ``model`` in place with softmax cross-entropy.

    Every epoch visits the samples in a fresh permutation drawn from a
    generator seeded with ``cfg.seed``, so runs with equal seeds are
    identical.  When the pool contains BN, a trailing batch of one sample is
    skipped.

    Raises
    ------
    TrainingDivergedError: The loss became non-finite; carries the global
      step index.
    """
    if len(data) == 0:
        raise EmptyDatasetError("Cannot train on an empty dataset")
    uses_bn = _uses_bn(model)
    if uses_bn and cfg.batch_size < 2:
        raise NormalizerConfigError("BN needs batches of at least 2 samples")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity: Dict[str, np.ndarray] = {}
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    if uses_bn and len(data) % cfg.batch_size == 1 and len(data) > 1:
        steps_per_epoch -= 1

    history = History()
    global_step = 0
    for epoch in range(cfg.epochs):
        if epoch in cfg.schedule.decay_epochs:
            logger.info(
                "Learning rate decayed",
                epoch=epoch + 1,
                lr=cfg.schedule.lr_at(epoch, 0, steps_per_epoch),
            )
        order = rng.permutation(len(data))
        total_loss = 0.0
        correct = 0
        seen = 0
        batches = data.batches(cfg.batch_size, order, drop_single=uses_bn)
        for step, (_, images, labels) in enumerate(batches):
            lr = cfg.schedule.lr_at(epoch, step, steps_per_epoch)
            for p in params:
                p.zero_grad()
            logits = model.forward(Tensor(images), training=True)
            loss = softmax_cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                logger.error(
                    "Training diverged", step=global_step, loss=value
                )
                raise TrainingDivergedError(global_step, value)
            grads = backward(loss, params)
            sgd_step(
                params, grads, velocity, lr, cfg.momentum, cfg.weight_decay
            )

            history.steps.append(StepRecord(epoch + 1, global_step, lr, value))
            total_loss += value * len(labels)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels))
            seen += len(labels)
            global_step += 1

        train_row = EpochRecord(
            epoch + 1, "train", total_loss / seen, correct / seen
        )
        history.epochs.append(train_row)
        if eval_data is not None:
            result = evaluate(model, eval_data)
            history.epochs.append(
                EpochRecord(epoch + 1, "val", result.loss, result.top1)
            )
        if cfg.record_ratios:
            history.ratios.extend(record_ratios(model, data, epoch + 1))
        logger.info(
            "Finished epoch",
            epoch=epoch + 1,
            loss=train_row.loss,
            top1=train_row.top1,
            lr=lr,
        )
    return history


def write_history_csv(history: History, path: Path) -> None:
    """Write the per-epoch rows as ``epoch,split,loss,top1``."""
    try:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "split", "loss", "top1"])
            for row in history.epochs:
                writer.writerow(
                    [row.epoch, row.split, repr(row.loss), repr(row.top1)]
                )
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Wrote history", path=str(path), rows=len(history.epochs))
