"""Dice / IoU and dataset evaluation reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .checkpoint import load_model
from .data import DatasetManifest, Split, load_sample
from .errors import DataError, ShapeError
from .network import SegModel, predict_samples
from .utils import file_digest, write_csv

logger = logging.getLogger(__name__)

EVAL_HEADER = ("id", "dice", "iou")


def _masks(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    p, g = _masks(pred_mask, gt_mask)
    denom = int(p.sum()) + int(g.sum())
    return 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """``|P & G| / |P | G|``; two empty masks score 1."""
    p, g = _masks(pred_mask, gt_mask)
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where ``pred >= threshold``; ties go to foreground."""
    return np.asarray(pred) >= threshold


@dataclass
class ImageScore:
    id: str
    dice: float
    iou: float


@dataclass
class EvalReport:
    scores: list[ImageScore]
    threshold: float
    checkpoint: str = ""
    mdice: float = field(init=False)
    miou: float = field(init=False)

    def __post_init__(self) -> None:
        self.mdice = float(np.mean([s.dice for s in self.scores])) if self.scores else 0.0
        self.miou = float(np.mean([s.iou for s in self.scores])) if self.scores else 0.0

    def write_csv(self, path: Path | str) -> Path:
        rows = [{"id": s.id, "dice": s.dice, "iou": s.iou} for s in self.scores]
        return write_csv(path, EVAL_HEADER, rows)


def score_predictions(
    preds: Mapping[str, np.ndarray],
    gts: Mapping[str, np.ndarray],
    threshold: float = 0.5,
    checkpoint: str = "",
) -> EvalReport:
    """Per-image scores, ordered by sample id, for probability maps against dense masks."""
    scores = []
    for sample_id in sorted(preds):
        if sample_id not in gts:
            raise DataError(f"no ground truth for {sample_id!r}")
        pred = np.asarray(preds[sample_id])
        mask = binarize(pred.reshape(pred.shape[-2:]), threshold)
        scores.append(ImageScore(sample_id, dice(mask, gts[sample_id]), iou(mask, gts[sample_id])))
    return EvalReport(scores=scores, threshold=threshold, checkpoint=checkpoint)


def evaluate(
    checkpoint: Path | str | SegModel,
    manifest: DatasetManifest,
    split: Split | str = Split.TEST,
    threshold: float = 0.5,
    size: Optional[tuple[int, int]] = None,
    workers: int = 1,
    out_csv: Path | str | None = None,
) -> EvalReport:
    """Score a checkpoint (or an in-memory model) on one split of a manifest.

    Raises:
        DataError: If any sample of the split lacks dense ground truth.
    """
    entries = manifest.split(split)
    missing = [e.id for e in entries if e.gt is None]
    if missing:
        raise DataError(f"split {Split(split).value} has samples without ground truth: {missing[:5]}")
    if isinstance(checkpoint, SegModel):
        model, label = checkpoint, f"{checkpoint.role.value}:{checkpoint.seed}"
    else:
        model, label = load_model(checkpoint), file_digest(checkpoint)[:16]
    samples = [load_sample(manifest, e, size) for e in entries]
    preds = predict_samples(model, samples, workers)
    report = score_predictions(preds, {s.id: s.dense_gt for s in samples}, threshold, label)
    logger.info(
        "evaluated %d %s images: mDice %.4f mIoU %.4f",
        len(report.scores),
        Split(split).value,
        report.mdice,
        report.miou,
    )
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
