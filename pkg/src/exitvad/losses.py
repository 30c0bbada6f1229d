"""Joint training objective for the multi-exit network.

Per exit: class-weighted cross entropy against the frame labels, plus two
distillation terms that pull each exit toward an ensemble teacher (the
arithmetic mean of all exits' logits and features). The teacher carries no
gradient, and the distillation terms never consult the labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .model import ExitOutputs


@dataclass(frozen=True)
class LossWeights:
    """Weights of the two distillation terms and the softening temperature."""

    alpha: float = 0.5
    beta: float = 1.0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be nonnegative, got {self.alpha}, {self.beta}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class ClassWeights:
    """Per-class cross-entropy weights, normalized to sum to the class count."""

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights):
            raise ValueError(f"class weights must be nonnegative, got {self.weights}")

    def as_tensor(self, dtype=torch.float32) -> Tensor:
        return torch.tensor(self.weights, dtype=dtype)


@dataclass
class LossBreakdown:
    """Total loss and its components; per_exit holds (ce, kl_prob, kl_feat)."""

    total: float
    classification: float
    prob_distill: float
    feat_distill: float
    per_exit: list[tuple[float, float, float]]


def class_weights_from_histogram(counts) -> ClassWeights:
    """Inverse-frequency weights from per-class frame counts.

    weight_k is proportional to 1 / max(count_k, 1) and the weights are
    renormalized to sum to the number of classes.
    """
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError(f"counts must be nonnegative, got {counts}")
    if sum(counts) == 0:
        raise ValueError("cannot derive class weights from an all-zero histogram")
    raw = [1.0 / max(c, 1) for c in counts]
    scale = len(counts) / sum(raw)
    return ClassWeights(tuple(w * scale for w in raw))


def weighted_cross_entropy(logits: Tensor, labels: Tensor, weights: ClassWeights) -> Tensor:
    """Weighted-mean cross entropy over all frames.

    Each frame contributes weight[label] * (-log softmax(logits)[label]);
    the sum is divided by the total applied weight, so the value is
    invariant to batch and chunk size.
    """
    if logits.shape[:-1] != labels.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree"
        )
    k = logits.shape[-1]
    if len(weights.weights) != k:
        raise ValueError(f"expected {k} class weights, got {len(weights.weights)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    w = weights.as_tensor(dtype=logits.dtype)[labels]
    return (w * nll).sum() / w.sum()


def ensemble_teacher(outputs: ExitOutputs) -> tuple[Tensor, Tensor]:
    """Element-wise mean of all exits' logits and features, detached."""
    z = torch.stack(outputs.logits).mean(dim=0).detach()
    f = torch.stack(outputs.features).mean(dim=0).detach()
    return z, f


def _kl_frames(teacher_logits: Tensor, student_logits: Tensor) -> Tensor:
    """KL(teacher || student) over the last axis, averaged over frames."""
    t_log = F.log_softmax(teacher_logits, dim=-1)
    s_log = F.log_softmax(student_logits, dim=-1)
    kl = (t_log.exp() * (t_log - s_log)).sum(dim=-1)
    return kl.mean()


def joint_loss(
    outputs: ExitOutputs,
    labels: Tensor,
    class_weights: ClassWeights,
    loss_weights: LossWeights,
    teacher: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Summed per-exit loss: cross entropy + alpha * KL to the teacher's
    softened probabilities + beta * KL between feature distributions.

    `teacher` can be supplied explicitly (it is held constant either way);
    by default it is the detached ensemble mean of `outputs`.
    """
    if teacher is None:
        teacher = ensemble_teacher(outputs)
    teacher_z, teacher_f = teacher
    tau = loss_weights.temperature

    ce_terms, kl_z_terms, kl_f_terms = [], [], []
    for z, f in zip(outputs.logits, outputs.features):
        ce_terms.append(weighted_cross_entropy(z, labels, class_weights))
        kl_z_terms.append(_kl_frames(teacher_z / tau, z / tau) * tau * tau)
        kl_f_terms.append(_kl_frames(teacher_f, f))

    classification = sum(ce_terms)
    prob_distill = sum(kl_z_terms)
    feat_distill = sum(kl_f_terms)
    total = classification + loss_weights.alpha * prob_distill + loss_weights.beta * feat_distill

    breakdown = LossBreakdown(
        total=float(total.detach()),
        classification=float(classification.detach()),
        prob_distill=float(prob_distill.detach()),
        feat_distill=float(feat_distill.detach()),
        per_exit=[
            (float(c.detach()), float(kz.detach()), float(kf.detach()))
            for c, kz, kf in zip(ce_terms, kl_z_terms, kl_f_terms)
        ],
    )
    return total, breakdown
