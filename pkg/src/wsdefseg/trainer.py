"""Training stages: weakly supervised teacher, pseudo labels, semi-supervised student.

Each stage writes a checkpoint plus a per-step metrics CSV next to it
(``<checkpoint stem>_metrics.csv``).
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .checkpoint import load_model, save_checkpoint
from .config import RunConfig, Stage
from .data import DatasetManifest, Sample, Split, load_split
from .errors import ConfigError
from .losses import LossReport, dense_loss, semi_loss, weak_loss
from .network import Role, SegModel, predict_samples
from .optim import Sgd
from .rng import Rng
from .tensor import Tape, Tensor
from .utils import file_digest, write_csv

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "l_p", "l_f", "l_weak", "l_c", "total", "branch")
CACHE_ARRAYS = "pseudo_labels.npz"
CACHE_META = "pseudo_labels.json"

# stream tags keep shuffling and dropout independent of parameter initialisation
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2

LossFn = Callable[[Sequence[Sample], list[Tensor]], LossReport]


@dataclass
class StageResult:
    model: SegModel
    checkpoint: Path
    metrics: Path
    rows: list[dict] = field(default_factory=list)
    epoch_totals: list[float] = field(default_factory=list)
    branch_counts: Counter = field(default_factory=Counter)


def metrics_path(checkpoint: Path | str) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(f"{checkpoint.stem}_metrics.csv")


def stream(seed: int, tag: int) -> Rng:
    return Rng((seed << 8) | tag)


def make_batches(n: int, batch_size: int, rng: Rng) -> list[list[int]]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def run_stage(
    model: SegModel,
    samples: Sequence[Sample],
    loss_fn: LossFn,
    config: RunConfig,
    checkpoint: Path | str,
) -> StageResult:
    """Shared SGD loop: seeded shuffling, one tape per batch, per-step metrics, epoch lr decay."""
    plan, sgd = config.plan, config.sgd
    checkpoint = Path(checkpoint)
    optimizer = Sgd(model.params, sgd)
    order_rng = stream(model.seed, _SHUFFLE_STREAM)
    dropout_rng = stream(model.seed, _DROPOUT_STREAM)
    result = StageResult(model=model, checkpoint=checkpoint, metrics=metrics_path(checkpoint))

    step = 0
    epochs = tqdm(range(plan.epochs), desc=f"{model.role.value}", disable=not config.progress)
    for epoch in epochs:
        totals = []
        for batch_index in make_batches(len(samples), sgd.batch_size, order_rng):
            batch = [samples[i] for i in batch_index]
            with Tape() as tape:
                preds = [model.forward(Tensor(s.image), training=True, rng=dropout_rng) for s in batch]
                report = loss_fn(batch, preds)
            if report.tensor.requires_grad:
                tape.backward(report.tensor)
                optimizer.step()
            else:
                logger.debug("step %d: loss does not depend on the parameters, skipped", step)
            optimizer.zero_grad()
            row = {"epoch": epoch, "step": step, **report.components, "total": report.total, "branch": report.branch}
            result.rows.append(row)
            result.branch_counts[report.branch] += 1
            totals.append(report.total)
            step += 1
        mean_total = float(np.mean(totals)) if totals else 0.0
        result.epoch_totals.append(mean_total)
        lr = optimizer.lr
        optimizer.end_epoch()
        epochs.set_postfix(loss=f"{mean_total:.4f}")
        logger.info(
            "%s epoch %d/%d: loss %.5f lr %.4g branches %s",
            model.role.value,
            epoch + 1,
            plan.epochs,
            mean_total,
            lr,
            dict(result.branch_counts),
        )

    save_checkpoint(model, checkpoint)
    write_csv(result.metrics, METRICS_HEADER, result.rows)
    return result


def _train_samples(manifest: DatasetManifest, config: RunConfig) -> list[Sample]:
    return load_split(manifest, Split.TRAIN, config.plan.input_size)


def train_weak_stage(manifest: DatasetManifest, config: RunConfig, checkpoint: Path | str) -> StageResult:
    """Train the teacher on the labeled subset with ``l_p + alpha * l_f``.

    Raises:
        ConfigError: If the train split has no labeled sample.
    """
    samples = [s for s in _train_samples(manifest, config) if s.is_labeled]
    if not samples:
        raise ConfigError(f"manifest {manifest.root} has no labeled train samples for the weak stage")
    model = SegModel(config.model, seed=config.plan.seed, role=Role.TEACHER)
    alpha = config.plan.alpha
    logger.info("weak stage: %d labeled samples, alpha=%.3g", len(samples), alpha)

    def loss_fn(batch: Sequence[Sample], preds: list[Tensor]) -> LossReport:
        return weak_loss(preds, [s.trimap for s in batch], alpha)

    return run_stage(model, samples, loss_fn, config, checkpoint)


def train_full_stage(manifest: DatasetManifest, config: RunConfig, checkpoint: Path | str) -> StageResult:
    """Fully supervised reference: dense BCE over every train image that has ground truth."""
    samples = [s for s in _train_samples(manifest, config) if s.dense_gt is not None]
    if not samples:
        raise ConfigError(f"manifest {manifest.root} has no train samples with dense ground truth")
    model = SegModel(config.model, seed=config.plan.seed, role=Role.TEACHER)
    logger.info("full stage: %d densely labeled samples", len(samples))

    def loss_fn(batch: Sequence[Sample], preds: list[Tensor]) -> LossReport:
        return dense_loss(preds, [s.dense_gt for s in batch])

    return run_stage(model, samples, loss_fn, config, checkpoint)


# ---------- pseudo labels ----------


@dataclass
class PseudoLabelCache:
    """Detached teacher predictions ``[1, H, W]`` for every train sample."""

    maps: dict[str, np.ndarray]
    teacher_digest: str
    input_size: tuple[int, int]

    def missing(self, ids: Sequence[str]) -> list[str]:
        return [i for i in ids if i not in self.maps]

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / CACHE_ARRAYS, **self.maps)
        meta = {"teacher_digest": self.teacher_digest, "input_size": list(self.input_size), "ids": list(self.maps)}
        (directory / CACHE_META).write_text(json.dumps(meta, indent=2))
        logger.info("wrote %d pseudo labels to %s", len(self.maps), directory)
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "PseudoLabelCache":
        directory = Path(directory)
        try:
            meta = json.loads((directory / CACHE_META).read_text())
            with np.load(directory / CACHE_ARRAYS) as arrays:
                maps = {i: np.array(arrays[i]) for i in meta["ids"]}
            return cls(maps=maps, teacher_digest=meta["teacher_digest"], input_size=tuple(meta["input_size"]))
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot read pseudo-label cache {directory}: {e}") from e


def generate_pseudo_labels(
    teacher_checkpoint: Path | str,
    manifest: DatasetManifest,
    config: RunConfig,
    out_dir: Path | str | None = None,
) -> PseudoLabelCache:
    """Teacher predictions for every train sample, labeled or not.

    Raises:
        CheckpointError: If the checkpoint does not fit its architecture.
    """
    teacher = load_model(teacher_checkpoint)
    if teacher.config.model_dump() != config.model.model_dump():
        logger.warning("architecture in %s differs from the run config, using the checkpoint's", teacher_checkpoint)
    samples = _train_samples(manifest, config)
    maps = predict_samples(teacher, samples, config.workers)
    cache = PseudoLabelCache(
        maps={i: m[None] for i, m in maps.items()},
        teacher_digest=file_digest(teacher_checkpoint),
        input_size=tuple(config.plan.input_size),
    )
    if out_dir is not None:
        cache.save(out_dir)
    return cache


def train_semi_stage(
    manifest: DatasetManifest,
    cache: PseudoLabelCache,
    teacher_checkpoint: Path | str,
    config: RunConfig,
    checkpoint: Path | str,
) -> StageResult:
    """Train a fresh student (teacher seed + 1) on all train samples with the gated semi loss.

    Raises:
        ConfigError: If the teacher checkpoint is missing, or the cache is incomplete, was made
            by another teacher or at another resolution.
    """
    teacher_checkpoint = Path(teacher_checkpoint)
    if not teacher_checkpoint.is_file():
        raise ConfigError(f"the semi stage needs a teacher checkpoint; {teacher_checkpoint} does not exist")
    if cache.teacher_digest != file_digest(teacher_checkpoint):
        raise ConfigError(f"pseudo-label cache was not produced by {teacher_checkpoint}")
    if tuple(cache.input_size) != tuple(config.plan.input_size):
        raise ConfigError(f"pseudo labels are {cache.input_size}, the plan trains at {config.plan.input_size}")
    samples = _train_samples(manifest, config)
    missing = cache.missing([s.id for s in samples])
    if missing:
        raise ConfigError(f"pseudo-label cache lacks {len(missing)} train samples, e.g. {missing[:5]}")

    plan = config.plan
    student = SegModel(config.model, seed=plan.seed + 1, role=Role.STUDENT)
    logger.info(
        "semi stage: %d samples (%d labeled), beta1=%.3g beta2=%.3g, weak term %s",
        len(samples),
        sum(s.is_labeled for s in samples),
        plan.beta1,
        plan.beta2,
        "on" if plan.semi_weak else "off",
    )

    def loss_fn(batch: Sequence[Sample], preds: list[Tensor]) -> LossReport:
        return semi_loss(
            preds,
            [cache.maps[s.id] for s in batch],
            [s.trimap for s in batch],
            plan.alpha,
            plan.beta1,
            plan.beta2,
            weak=plan.semi_weak,
        )

    return run_stage(student, samples, loss_fn, config, checkpoint)


def train_stage(
    stage: Stage,
    manifest: DatasetManifest,
    config: RunConfig,
    checkpoint: Path | str,
    teacher_checkpoint: Optional[Path | str] = None,
    cache: Optional[PseudoLabelCache] = None,
) -> StageResult:
    """Dispatch on ``stage``; the semi stage builds a pseudo-label cache when none is given."""
    if stage is Stage.WEAK:
        return train_weak_stage(manifest, config, checkpoint)
    if stage is Stage.FULL:
        return train_full_stage(manifest, config, checkpoint)
    if teacher_checkpoint is None:
        raise ConfigError("the semi stage needs a teacher checkpoint")
    if cache is None:
        cache = generate_pseudo_labels(teacher_checkpoint, manifest, config)
    return train_semi_stage(manifest, cache, teacher_checkpoint, config, checkpoint)
