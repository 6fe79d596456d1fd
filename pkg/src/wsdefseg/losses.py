"""Weak, consistency and semi-supervised losses over prediction maps.

Predictions are per-image tensors ``[1, H, W]`` with values in (0, 1); a batch is a sequence
of them. Per-pixel losses are averaged within each image first, then over the images that
contribute, so every image weighs the same regardless of how many pixels it labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .data import WeakLabelMap
from .errors import ConfigError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

COMPONENTS = ("l_p", "l_f", "l_weak", "l_c")
BRANCH_LABELED = "labeled"
BRANCH_UNLABELED = "unlabeled"


@dataclass
class LossReport:
    """Scalar total, its named parts and the tensor to differentiate."""

    total: float
    components: dict[str, float]
    batch_had_labels: bool
    tensor: Tensor = field(repr=False)

    @property
    def branch(self) -> str:
        return BRANCH_LABELED if self.batch_had_labels else BRANCH_UNLABELED


def _batch(preds, labels=None) -> tuple[list[Tensor], list]:
    if isinstance(preds, Tensor):
        preds = [preds]
    if isinstance(labels, WeakLabelMap):
        labels = [labels]
    return list(preds), (None if labels is None else list(labels))


def _check_pred(pred: Tensor, shape: tuple[int, int], what: str) -> None:
    if pred.shape != (1, *shape):
        raise ShapeError(f"{what}: prediction {pred.shape} does not match labels {shape}")


def _masked_bce(pred: Tensor, mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """-(y log p + (1 - y) log(1 - p)) averaged over ``mask``."""
    m = Tensor(mask.astype(np.float64)[None])
    y = Tensor(targets[None])
    log_p = ops.log(pred)
    log_q = ops.log(ops.sub(1.0, pred))
    per_pixel = ops.add(ops.mul(y, log_p), ops.mul(ops.sub(1.0, y), log_q))
    return ops.mul(ops.sum(ops.mul(m, per_pixel)), -1.0 / float(mask.sum()))


def _average(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def partial_ce(preds, labels) -> Tensor:
    """Binary cross-entropy on labeled pixels only.

    Images without any labeled pixel are skipped; a batch without any gives 0.
    """
    preds, labels = _batch(preds, labels)
    if len(preds) != len(labels):
        raise ShapeError(f"partial_ce: {len(preds)} predictions for {len(labels)} label maps")
    terms = []
    for pred, lab in zip(preds, labels):
        _check_pred(pred, lab.shape, "partial_ce")
        if lab.has_labels:
            terms.append(_masked_bce(pred, lab.labeled_mask, lab.targets))
    return _average(terms)


def sparse_foreground_loss(preds, labels) -> Tensor:
    """``-mean(log p)`` over foreground scribble pixels; no foreground pixels gives 0."""
    preds, labels = _batch(preds, labels)
    if len(preds) != len(labels):
        raise ShapeError(f"sparse_foreground_loss: {len(preds)} predictions for {len(labels)} label maps")
    terms = []
    for pred, lab in zip(preds, labels):
        _check_pred(pred, lab.shape, "sparse_foreground_loss")
        if lab.foreground_count:
            fg = lab.foreground_mask
            terms.append(_masked_bce(pred, fg, np.ones(fg.shape)))
    return _average(terms)


def weak_loss(preds, labels, alpha: float = 0.5) -> LossReport:
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    preds, labels = _batch(preds, labels)
    l_p = partial_ce(preds, labels)
    l_f = sparse_foreground_loss(preds, labels)
    total = ops.add(l_p, ops.mul(l_f, alpha))
    return LossReport(
        total=total.item(),
        components={"l_p": l_p.item(), "l_f": l_f.item(), "l_weak": total.item(), "l_c": 0.0},
        batch_had_labels=any(lab.has_labels for lab in labels),
        tensor=total,
    )


def dense_loss(preds, masks: Sequence[np.ndarray]) -> LossReport:
    """Fully supervised BCE over every pixel of the dense masks."""
    preds, _ = _batch(preds)
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        masks = [masks]
    total = partial_ce(preds, [WeakLabelMap.from_dense(m) for m in masks])
    return LossReport(
        total=total.item(),
        components={"l_p": total.item(), "l_f": 0.0, "l_weak": total.item(), "l_c": 0.0},
        batch_had_labels=True,
        tensor=total,
    )


def consistency_loss(student_preds, teacher_preds) -> Tensor:
    """Mean absolute student/teacher gap per image, averaged over the batch.

    Teacher maps are taken as constants, so no gradient reaches them.
    """
    student_preds, _ = _batch(student_preds)
    if isinstance(teacher_preds, (Tensor, np.ndarray)) and len(student_preds) == 1:
        teacher_preds = [teacher_preds]
    teacher_preds = list(teacher_preds)
    if len(student_preds) != len(teacher_preds):
        raise ShapeError(f"consistency_loss: {len(student_preds)} student maps for {len(teacher_preds)} teacher maps")
    terms = []
    for s, t in zip(student_preds, teacher_preds):
        target = Tensor(t.data if isinstance(t, Tensor) else t)
        if target.shape != s.shape:
            raise ShapeError(f"consistency_loss: student {s.shape} and teacher {target.shape} differ")
        terms.append(ops.mean(ops.abs(ops.sub(s, target))))
    return _average(terms)


def semi_loss(
    preds,
    teacher_preds,
    labels: Sequence[Optional[WeakLabelMap]],
    alpha: float = 0.5,
    beta1: float = 0.1,
    beta2: float = 0.5,
    weak: bool = True,
) -> LossReport:
    """Batch-wise gated loss for the student.

    With any labeled sample in the batch: ``L_weak(labeled samples) + beta1 * L_c(all)``;
    otherwise ``beta2 * L_c(all)``. With ``weak=False`` every batch takes ``beta2 * L_c(all)``.
    """
    preds, labels = _batch(preds, labels)
    labels = [None] * len(preds) if labels is None else labels
    if len(labels) != len(preds):
        raise ShapeError(f"semi_loss: {len(preds)} predictions for {len(labels)} label maps")
    l_c = consistency_loss(preds, teacher_preds)
    labeled = [(p, lab) for p, lab in zip(preds, labels) if lab is not None]
    if labeled and weak:
        supervised = weak_loss([p for p, _ in labeled], [lab for _, lab in labeled], alpha)
        total = ops.add(supervised.tensor, ops.mul(l_c, beta1))
        components = dict(supervised.components, l_c=l_c.item())
    else:
        total = ops.mul(l_c, beta2)
        components = {"l_p": 0.0, "l_f": 0.0, "l_weak": 0.0, "l_c": l_c.item()}
    logger.debug("semi loss branch=%s total=%.6f", BRANCH_LABELED if labeled else BRANCH_UNLABELED, total.item())
    return LossReport(total=total.item(), components=components, batch_had_labels=bool(labeled), tensor=total)
