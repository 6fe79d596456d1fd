"""Ablation grid over alpha, (beta1, beta2), the consistency-only student, the neck switch and seeds."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, Stage, SweepConfig
from .data import DatasetManifest
from .metrics import evaluate
from .trainer import generate_pseudo_labels, train_full_stage, train_semi_stage, train_weak_stage
from .utils import write_csv
from .wpolyp import synthesize_dataset

logger = logging.getLogger(__name__)

SWEEP_HEADER = ("stage", "alpha", "beta1", "beta2", "use_dten", "seed", "mdice", "miou", "default", "weak_term")
MEDIAN = "median"


@dataclass
class SweepRow:
    stage: str
    alpha: Optional[float]
    beta1: Optional[float]
    beta2: Optional[float]
    use_dten: bool
    seed: int | str
    mdice: float
    miou: float
    default: bool
    weak_term: bool = True

    def key(self) -> tuple:
        return self.stage, self.alpha, self.beta1, self.beta2, self.use_dten, self.weak_term


def _run_config(base: RunConfig, stage: Stage, seed: int, use_dten: bool, **plan) -> RunConfig:
    data = base.model_dump()
    data["model"]["use_dten"] = use_dten
    data["plan"].update(stage=stage, seed=seed, **plan)
    return RunConfig.model_validate(data)


def _is_default(row: SweepRow, base: RunConfig) -> bool:
    plan = base.plan
    if not row.use_dten or not row.weak_term:
        return False
    if row.stage == Stage.WEAK.value:
        return row.alpha == plan.alpha
    if row.stage == Stage.SEMI.value:
        return (row.beta1, row.beta2) == (plan.beta1, plan.beta2)
    return False


def median_rows(rows: list[SweepRow]) -> list[SweepRow]:
    """One median row per configuration, in first-seen order."""
    groups: dict[tuple, list[SweepRow]] = defaultdict(list)
    for row in rows:
        groups[row.key()].append(row)
    out = []
    for group in groups.values():
        first = group[0]
        out.append(
            SweepRow(
                stage=first.stage,
                alpha=first.alpha,
                beta1=first.beta1,
                beta2=first.beta2,
                use_dten=first.use_dten,
                seed=MEDIAN,
                mdice=float(np.median([r.mdice for r in group])),
                miou=float(np.median([r.miou for r in group])),
                default=first.default,
                weak_term=first.weak_term,
            )
        )
    return out


def _sweep_seed(
    config: SweepConfig, seed: int, use_dten: bool, manifest: DatasetManifest, work: Path
) -> list[SweepRow]:
    base = config.run
    size = base.plan.input_size
    rows = []

    def score(stage: Stage, checkpoint: Path, alpha=None, beta1=None, beta2=None, weak_term=True) -> None:
        report = evaluate(checkpoint, manifest, threshold=base.plan.threshold, size=size, workers=base.workers)
        row = SweepRow(stage.value, alpha, beta1, beta2, use_dten, seed, report.mdice, report.miou, False, weak_term)
        row.default = _is_default(row, base)
        rows.append(row)

    teachers: dict[float, Path] = {}
    for alpha in config.alphas:
        cfg = _run_config(base, Stage.WEAK, seed, use_dten, alpha=alpha)
        ckpt = work / f"weak_alpha{alpha:g}.wsds"
        train_weak_stage(manifest, cfg, ckpt)
        teachers[alpha] = ckpt
        score(Stage.WEAK, ckpt, alpha=alpha)

    if config.betas or config.consistency_only:
        alpha = base.plan.alpha
        if alpha not in teachers:
            teachers[alpha] = work / f"weak_alpha{alpha:g}.wsds"
            train_weak_stage(manifest, _run_config(base, Stage.WEAK, seed, use_dten, alpha=alpha), teachers[alpha])
        teacher = teachers[alpha]
        cache = generate_pseudo_labels(teacher, manifest, _run_config(base, Stage.SEMI, seed, use_dten))
        for beta1, beta2 in config.betas:
            cfg = _run_config(base, Stage.SEMI, seed, use_dten, alpha=alpha, beta1=beta1, beta2=beta2)
            ckpt = work / f"semi_beta{beta1:g}_{beta2:g}.wsds"
            train_semi_stage(manifest, cache, teacher, cfg, ckpt)
            score(Stage.SEMI, ckpt, alpha=alpha, beta1=beta1, beta2=beta2)
        if config.consistency_only:
            beta2 = base.plan.beta2
            cfg = _run_config(base, Stage.SEMI, seed, use_dten, alpha=alpha, beta2=beta2, semi_weak=False)
            ckpt = work / f"semi_lc_only_{beta2:g}.wsds"
            train_semi_stage(manifest, cache, teacher, cfg, ckpt)
            score(Stage.SEMI, ckpt, beta2=beta2, weak_term=False)

    if config.include_full:
        ckpt = work / "full.wsds"
        train_full_stage(manifest, _run_config(base, Stage.FULL, seed, use_dten), ckpt)
        score(Stage.FULL, ckpt)
    return rows


def ablation_sweep(config: SweepConfig, out_dir: Path | str, out_csv: Path | str | None = None) -> list[SweepRow]:
    """Train and score every grid point for every seed; each seed regenerates its dataset.

    Returns per-seed rows followed by one median row per configuration.
    """
    out_dir = Path(out_dir)
    rows: list[SweepRow] = []
    for seed in config.seeds:
        synth = config.synth.model_copy(update={"seed": seed})
        manifest = synthesize_dataset(synth, out_dir / f"seed{seed}" / "data", progress=config.run.progress)
        for use_dten in config.use_dten:
            work = out_dir / f"seed{seed}" / ("dten" if use_dten else "plain")
            logger.info("sweep seed %d, neck %s", seed, "on" if use_dten else "off")
            rows.extend(_sweep_seed(config, seed, use_dten, manifest, work))
    rows.extend(median_rows(rows))
    if out_csv is not None:
        write_csv(out_csv, SWEEP_HEADER, (asdict(r) for r in rows))
    return rows
