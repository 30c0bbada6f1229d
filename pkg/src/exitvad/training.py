"""Optimization loop: Adam over the joint loss with a plateau-driven
learning-rate schedule and best-on-dev checkpoint selection.

Runs are bitwise reproducible for a fixed seed and single-context
execution: batch order comes from a dedicated RNG and nothing else in the
loop is stochastic.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ChunkSample, label_histogram
from .losses import (
    ClassWeights,
    LossBreakdown,
    LossWeights,
    class_weights_from_histogram,
    joint_loss,
)
from .model import MultiExitCRNN


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    batch_size defaults to a desk-scale 32; the published setting is 256.
    """

    epochs: int = 50
    batch_size: int = 32
    initial_lr: float = 0.001
    plateau_factor: float = 0.6
    plateau_patience_epochs: int = 6
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience_epochs < 1:
            raise ValueError(f"plateau_patience_epochs must be >= 1, got {self.plateau_patience_epochs}")


class PlateauScheduler:
    """Multiply the learning rate by `factor` whenever the monitored loss
    has not decreased for `patience` consecutive epochs."""

    def __init__(self, initial_lr: float, factor: float, patience: int) -> None:
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.best: float = math.inf
        self.stale = 0

    def step(self, monitored_loss: float) -> float:
        """Record one epoch's monitored loss; returns the lr to use next."""
        if monitored_loss < self.best:
            self.best = monitored_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    dev: LossBreakdown
    dev_accuracy: list[float]  # frame accuracy per exit
    learning_rate: float


@dataclass
class FitResult:
    best_model: MultiExitCRNN
    best_epoch: int
    best_dev_loss: float
    history: list[EpochRecord]
    training_state: dict  # optimizer state + bookkeeping, for resume


def _to_tensors(chunks: Sequence[ChunkSample]) -> tuple[torch.Tensor, torch.Tensor]:
    waves = torch.from_numpy(np.stack([c.waveform for c in chunks]).astype(np.float32))
    labels = torch.from_numpy(np.stack([c.labels for c in chunks]).astype(np.int64))
    return waves, labels


def evaluate_dev(
    model: MultiExitCRNN,
    dev_set: Sequence[ChunkSample],
    class_weights: ClassWeights,
    loss_weights: LossWeights,
    batch_size: int = 32,
) -> tuple[LossBreakdown, list[float]]:
    """Loss breakdown and per-exit frame accuracy; mutates nothing."""
    if len(dev_set) == 0:
        raise ValueError("dev_set must be non-empty")
    was_training = model.training
    model.eval()
    num_exits = model.config.num_exits
    sums = {"total": 0.0, "classification": 0.0, "prob": 0.0, "feat": 0.0}
    per_exit = [[0.0, 0.0, 0.0] for _ in range(num_exits)]
    correct = [0 for _ in range(num_exits)]
    frames = 0
    batches = 0
    try:
        with torch.no_grad():
            for start in range(0, len(dev_set), batch_size):
                waves, labels = _to_tensors(dev_set[start : start + batch_size])
                outputs = model(waves)
                _, breakdown = joint_loss(outputs, labels, class_weights, loss_weights)
                sums["total"] += breakdown.total
                sums["classification"] += breakdown.classification
                sums["prob"] += breakdown.prob_distill
                sums["feat"] += breakdown.feat_distill
                for i, triple in enumerate(breakdown.per_exit):
                    for j in range(3):
                        per_exit[i][j] += triple[j]
                batches += 1
                frames += labels.numel()
                for i, z in enumerate(outputs.logits):
                    correct[i] += int((z.argmax(dim=-1) == labels).sum())
    finally:
        if was_training:
            model.train()
    breakdown = LossBreakdown(
        total=sums["total"] / batches,
        classification=sums["classification"] / batches,
        prob_distill=sums["prob"] / batches,
        feat_distill=sums["feat"] / batches,
        per_exit=[tuple(v / batches for v in row) for row in per_exit],
    )
    accuracy = [c / frames for c in correct]
    return breakdown, accuracy


def fit(
    model: MultiExitCRNN,
    train_set: Sequence[ChunkSample],
    dev_set: Sequence[ChunkSample],
    config: TrainConfig,
) -> FitResult:
    """Train for config.epochs epochs and keep the best-dev-loss weights.

    Class weights come from the training-set label histogram. The plateau
    rule watches the dev total loss. A non-finite loss aborts with the
    epoch, step, and component that diverged.
    """
    if len(train_set) == 0 or len(dev_set) == 0:
        raise ValueError("train_set and dev_set must be non-empty")
    class_weights = class_weights_from_histogram(label_histogram(train_set))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr)
    scheduler = PlateauScheduler(
        config.initial_lr, config.plateau_factor, config.plateau_patience_epochs
    )
    rng = np.random.default_rng(config.seed)

    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    best_dev = math.inf
    history: list[EpochRecord] = []
    lr = config.initial_lr

    model.train()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        train_sums = {"total": 0.0, "classification": 0.0, "prob": 0.0, "feat": 0.0}
        train_per_exit = [[0.0, 0.0, 0.0] for _ in range(model.config.num_exits)]
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            waves, labels = _to_tensors(batch)
            optimizer.zero_grad()
            outputs = model(waves)
            total, breakdown = joint_loss(
                outputs, labels, class_weights, config.loss_weights
            )
            _abort_if_nonfinite(breakdown, epoch, batches)
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            train_sums["total"] += breakdown.total
            train_sums["classification"] += breakdown.classification
            train_sums["prob"] += breakdown.prob_distill
            train_sums["feat"] += breakdown.feat_distill
            for i, triple in enumerate(breakdown.per_exit):
                for j in range(3):
                    train_per_exit[i][j] += triple[j]
            batches += 1

        train_breakdown = LossBreakdown(
            total=train_sums["total"] / batches,
            classification=train_sums["classification"] / batches,
            prob_distill=train_sums["prob"] / batches,
            feat_distill=train_sums["feat"] / batches,
            per_exit=[tuple(v / batches for v in row) for row in train_per_exit],
        )
        dev_breakdown, dev_accuracy = evaluate_dev(
            model, dev_set, class_weights, config.loss_weights, config.batch_size
        )
        history.append(
            EpochRecord(epoch, train_breakdown, dev_breakdown, dev_accuracy, lr)
        )
        if dev_breakdown.total < best_dev:
            best_dev = dev_breakdown.total
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        lr = scheduler.step(dev_breakdown.total)
        for group in optimizer.param_groups:
            group["lr"] = lr

    best_model = MultiExitCRNN(model.config)
    best_model.load_state_dict(best_state)
    training_state = {
        "optimizer": optimizer.state_dict(),
        "epoch": config.epochs,
        "learning_rate": lr,
        "best_dev_loss": best_dev if best_dev != math.inf else None,
    }
    return FitResult(
        best_model=best_model,
        best_epoch=best_epoch,
        best_dev_loss=best_dev if best_dev != math.inf else float("nan"),
        history=history,
        training_state=training_state,
    )


def _abort_if_nonfinite(breakdown: LossBreakdown, epoch: int, step: int) -> None:
    for name, value in (
        ("classification", breakdown.classification),
        ("prob_distill", breakdown.prob_distill),
        ("feat_distill", breakdown.feat_distill),
        ("total", breakdown.total),
    ):
        if not math.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}, step {step}: component {name} = {value}"
            )


# ---------------------------------------------------------------------------
# History and config files
# ---------------------------------------------------------------------------

def history_to_jsonl(history: Sequence[EpochRecord]) -> str:
    """One JSON object per epoch record."""
    lines = []
    for rec in history:
        lines.append(
            json.dumps(
                {
                    "epoch": rec.epoch,
                    "train": asdict(rec.train),
                    "dev": asdict(rec.dev),
                    "dev_accuracy": rec.dev_accuracy,
                    "learning_rate": rec.learning_rate,
                }
            )
        )
    return "".join(line + "\n" for line in lines)


def write_history(history: Sequence[EpochRecord], path) -> None:
    Path(path).write_text(history_to_jsonl(history))


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if "," in text:
        return tuple(_parse_value(part) for part in text.split(","))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def load_keyvalue_config(path) -> dict:
    """Parse a flat `key = value` config file.

    Section headers ([model], [train], ...) are allowed and ignored: keys
    are global. Values become bool/int/float/tuple/str; '#' starts a
    comment.
    """
    result: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        if key in result:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        result[key] = _parse_value(value)
    return result
