"""Dynamic masking and the training losses: MLM, supervised finetuning, self-training.

All three losses are means, not sums: per masked token for MLM, per scored
unit (example, first-piece position or label slot) for the supervised and
distillation terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, DistributionError, ObjectiveError
from .model import MLM, Batch, Model, collate
from .text import CLS_ID, MASK_ID, MULTI_LABEL, PAD_ID, SEP_ID, TAGGING, Example, Label, TaskKind

_SPECIAL_IDS = (CLS_ID, SEP_ID, PAD_ID)


@dataclass
class MaskedBatch:
    """Corrupted ids, the per-position mask indicator and the original ids."""

    batch: Batch
    mask: np.ndarray  # [B, T] bool
    targets: np.ndarray  # [B, T] original ids

    @property
    def ids(self) -> np.ndarray:
        return self.batch.ids

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def eligible_positions(ids: np.ndarray) -> np.ndarray:
    return ~np.isin(ids, _SPECIAL_IDS)


def apply_dynamic_mask(examples: Sequence[Example] | Batch, mask_prob: float, rng: np.random.Generator) -> MaskedBatch:
    """Replace each eligible position by ``[MASK]`` independently with ``mask_prob``.

    Called afresh on every visit, so the pattern changes between epochs. A
    batch that draws no mask is redrawn once, then one random eligible
    position is forced.
    """
    if not 0 < mask_prob < 1:
        raise ValueError("mask_prob must lie in (0, 1)")
    batch = examples if isinstance(examples, Batch) else collate(examples)
    original = batch.ids
    eligible = eligible_positions(original)
    if not eligible.any():
        raise DataError("batch has no maskable positions")
    mask = (rng.random(original.shape) < mask_prob) & eligible
    if not mask.any():
        mask = (rng.random(original.shape) < mask_prob) & eligible
    if not mask.any():
        flat = np.flatnonzero(eligible)
        mask.flat[flat[int(rng.integers(flat.size))]] = True
    corrupted = np.where(mask, MASK_ID, original)
    return MaskedBatch(Batch(corrupted, batch.pad.copy(), list(batch.lengths)), mask, original.copy())


def mlm_loss_from_logits(logits: Tensor, masked: MaskedBatch) -> Tensor:
    """Mean negative log-likelihood of the original ids at masked positions only."""
    if masked.num_masked == 0:
        raise ObjectiveError("MLM loss needs at least one masked position")
    targets = np.where(masked.mask, masked.targets, -1)
    return ag.cross_entropy(logits, targets)


def mlm_loss(model: Model, masked: MaskedBatch, train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    if masked.num_masked == 0:
        raise ObjectiveError("MLM loss needs at least one masked position")
    hidden = model.encode(masked.batch, train_mode, rng)
    return mlm_loss_from_logits(model.head_forward(MLM, hidden), masked)


# supervised targets


def tagging_targets(examples: Sequence[Example], labels: Sequence[Label], length: int) -> np.ndarray:
    """Per-position tag targets; -1 everywhere except each word's first piece."""
    out = np.full((len(examples), length), -1, dtype=np.int64)
    for i, (ex, tags) in enumerate(zip(examples, labels)):
        pos = ex.first_piece_positions()
        if len(pos) != len(tags):
            raise DataError(f"example {ex.uid}: {len(pos)} words but {len(tags)} tags")
        out[i, pos] = tags
    return out


def scored_positions(examples: Sequence[Example], length: int) -> np.ndarray:
    out = np.zeros((len(examples), length), dtype=bool)
    for i, ex in enumerate(examples):
        out[i, ex.first_piece_positions()] = True
    return out


def _check_labels(task: TaskKind, labels: Sequence[Label]) -> None:
    k = task.num_classes
    for lab in labels:
        values = lab if isinstance(lab, tuple) else (lab,)
        if task.kind not in (TAGGING, MULTI_LABEL) and isinstance(lab, tuple):
            raise DataError(f"{task.kind} expects integer labels")
        for v in values:
            if not 0 <= v < k:
                raise DataError(f"label {v} outside [0, {k})")


def supervised_loss_from_scores(scores: Tensor, task: TaskKind, examples: Sequence[Example], labels: Sequence[Label]) -> Tensor:
    _check_labels(task, labels)
    if task.kind == TAGGING:
        return ag.cross_entropy(scores, tagging_targets(examples, labels, scores.shape[1]))
    if task.kind == MULTI_LABEL:
        targets = np.zeros(scores.shape, dtype=np.int64)
        for i, lab in enumerate(labels):
            targets[i, list(lab)] = 1
        return ag.pick(ag.binary_log_probs(scores), targets)
    return ag.cross_entropy(scores, np.asarray(labels, dtype=np.int64))


def task_scores(model: Model, task: TaskKind, examples: Sequence[Example], train_mode: bool = False, rng=None) -> Tensor:
    hidden = model.encode(collate(examples), train_mode, rng)
    return model.head_forward(task.kind, hidden)


def supervised_loss(
    model: Model,
    task: TaskKind,
    batch: Sequence[tuple[Example, Label]],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy for classification and tagging (first pieces only), mean BCE for multi-label."""
    if not batch:
        raise ObjectiveError("supervised loss needs a non-empty batch")
    examples = [ex for ex, _ in batch]
    labels = [lab for _, lab in batch]
    _check_labels(task, labels)
    return supervised_loss_from_scores(task_scores(model, task, examples, train_mode, rng), task, examples, labels)


# pseudo labels and the self-training objective


@dataclass
class PseudoLabeledSet:
    """Unlabeled examples paired with the teacher's soft labels.

    Distributions are ``[K]`` for classification, ``[len(input_ids), K]`` for
    tagging and ``[K]`` per-slot sigmoid probabilities for multi-label.
    """

    task: TaskKind
    items: list[tuple[Example, np.ndarray]]
    teacher_id: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def subset(self, indices: Sequence[int]) -> "PseudoLabeledSet":
        return PseudoLabeledSet(self.task, [self.items[i] for i in indices], self.teacher_id)

    def hard_labels(self) -> list:
        if self.task.kind == MULTI_LABEL:
            return [tuple(np.flatnonzero(d >= 0.5).tolist()) for _, d in self.items]
        if self.task.kind == TAGGING:
            return [tuple(d[ex.first_piece_positions()].argmax(-1).tolist()) for ex, d in self.items]
        return [int(d.argmax()) for _, d in self.items]

    def validate(self, atol: float = 1e-5) -> None:
        for ex, d in self.items:
            if (d < 0).any() or not np.isfinite(d).all():
                raise DistributionError(f"pseudo label for example {ex.uid} has invalid entries")
            if self.task.kind == MULTI_LABEL:
                if (d > 1).any():
                    raise DistributionError(f"pseudo label for example {ex.uid} has probabilities above 1")
            elif np.abs(d.sum(-1) - 1.0).max() > atol:
                raise DistributionError(f"pseudo label for example {ex.uid} does not sum to 1")


def distillation_from_scores(scores: Tensor, pseudo: PseudoLabeledSet) -> Tensor:
    """Mean KL(teacher || student) over the units the supervised loss would score."""
    examples = [ex for ex, _ in pseudo.items]
    # float64 so that a student matching its teacher scores a KL near 0, not float32 noise
    scores = ag.cast(scores, np.float64)
    if pseudo.task.kind == TAGGING:
        b, t, k = scores.shape
        p = np.zeros((b, t, k))
        p[..., 0] = 1.0
        for i, (ex, d) in enumerate(pseudo.items):
            p[i, : d.shape[0]] = d
        return ag.kl_divergence(p, ag.log_softmax(scores, -1), rows=scored_positions(examples, t))
    if pseudo.task.kind == MULTI_LABEL:
        probs = np.stack([d for _, d in pseudo.items]).astype(np.float64)
        p = np.stack([1.0 - probs, probs], axis=-1)
        return ag.kl_divergence(p, ag.binary_log_probs(scores))
    p = np.stack([d for _, d in pseudo.items]).astype(np.float64)
    return ag.kl_divergence(p, ag.log_softmax(scores, -1))


def st_loss_terms(
    student: Model,
    task: TaskKind,
    labeled: Sequence[tuple[Example, Label]],
    pseudo: PseudoLabeledSet,
    unlabeled_weight: float = 1.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(total, labeled CE, KL)``; KL is None for an empty pseudo batch."""
    if pseudo.task != task:
        raise ObjectiveError(f"pseudo batch is for {pseudo.task.kind}, labeled batch for {task.kind}")
    ce = supervised_loss(student, task, labeled, train_mode, rng)
    if len(pseudo) == 0:
        return ce, ce, None
    scores = task_scores(student, task, [ex for ex, _ in pseudo.items], train_mode, rng)
    kl = distillation_from_scores(scores, pseudo)
    return ce + kl * unlabeled_weight, ce, kl


def st_loss(
    student: Model,
    task: TaskKind,
    labeled: Sequence[tuple[Example, Label]],
    pseudo: PseudoLabeledSet,
    unlabeled_weight: float = 1.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return st_loss_terms(student, task, labeled, pseudo, unlabeled_weight, train_mode, rng)[0]
