"""Synthetic scribble-annotated polyp-like dataset and labeled-pixel statistics.

Images are smooth value-noise "tissue" backgrounds carrying one or two radially perturbed
ellipses with their own colour and texture. A share of the train images gets a trimap made
of one foreground and one background stroke; the strokes are pixel-budgeted so the labeled
share over the whole train split lands near the configured target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

from .config import W_POLYP_LABELED_FRACTION, W_POLYP_LABELED_SHARE, SynthConfig
from .data import DatasetManifest, LabelState, Sample, Split, WeakLabelMap, image_size, read_trimap, save_sample
from .errors import DataError
from .ops import resize_matrix
from .rng import Rng
from .utils import write_csv

logger = logging.getLogger(__name__)

HIST_BIN_PERCENT = 0.5
STATS_HEADER = ("kind", "id", "percent", "bin_low", "bin_high", "count")


class StrokeStyle(str, Enum):
    LINE = "line"
    SCRIBBLE = "scribble"
    CIRCLE = "circle"


# ---------- images ----------


def value_noise(rng: Rng, size: int, octaves: tuple[int, ...] = (4, 8, 16), persistence: float = 0.5) -> np.ndarray:
    """Smooth fractal noise ``[size, size]`` in [0, 1] from bilinearly upsampled random grids."""
    total = np.zeros((size, size))
    amp = 1.0
    for cells in octaves:
        up = resize_matrix(cells + 1, size)
        total += amp * (up @ rng.random_array((cells + 1, cells + 1)) @ up.T)
        amp *= persistence
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def blob_mask(rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One perturbed ellipse; returns the mask and the normalized radius map used for shading."""
    cy, cx = rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size
    a, b = rng.uniform(0.12, 0.24) * size, rng.uniform(0.12, 0.24) * size
    angle = rng.uniform(0.0, math.pi)
    harmonics = [(k, rng.uniform(0.0, 0.12), rng.uniform(0.0, 2 * math.pi)) for k in (2, 3, 4)]

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - cx) * math.cos(angle) + (yy - cy) * math.sin(angle)
    v = -(xx - cx) * math.sin(angle) + (yy - cy) * math.cos(angle)
    rho = np.hypot(u / a, v / b)
    theta = np.arctan2(v / b, u / a)
    boundary = 1.0 + sum(amp * np.cos(k * theta + phase) for k, amp, phase in harmonics)
    return rho <= boundary, rho / boundary


def render_sample(rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Image ``[3, H, W]`` quantized to 8-bit levels, and its dense mask."""
    tissue = np.array([0.78, 0.42, 0.38]) + rng.uniform_array(-0.08, 0.08, 3)
    background = tissue[:, None, None] * (0.55 + 0.45 * value_noise(rng, size))

    mask = np.zeros((size, size), dtype=bool)
    shade = np.ones((size, size))
    for _ in range(1 + (rng.random() < 0.5)):
        blob, radius = blob_mask(rng, size)
        mask |= blob
        shade = np.where(blob, np.minimum(shade, radius), shade)
    polyp_color = np.array([0.92, 0.72, 0.48]) + rng.uniform_array(-0.06, 0.06, 3)
    texture = 0.8 + 0.2 * value_noise(rng, size, octaves=(16, 32))
    polyp = polyp_color[:, None, None] * texture * (1.0 - 0.35 * shade**2)

    image = np.clip(np.where(mask, polyp, background), 0.0, 1.0)
    return np.rint(image * 255.0) / 255.0, mask


# ---------- scribbles ----------


def default_stroke_budget(shape: tuple[int, int], labeled_share: float, labeled_fraction: float) -> int:
    """Pixels per stroke so the labeled share over the whole train split meets the target."""
    return max(1, round(labeled_share / labeled_fraction * shape[0] * shape[1] / 2))


def draw_stroke(region: np.ndarray, budget: int, rng: Rng, style: StrokeStyle) -> np.ndarray:
    """Paint one polyline inside ``region`` until ``budget`` pixels (capped at half the region) are set.

    Vertices come from a random walk confined to ``region``; segments are rasterised with
    ``ImageDraw.line`` and cut back to the region. Pixels past the budget are dropped in raster order.
    """
    h, w = region.shape
    target = max(1, min(budget, int(region.sum()) // 2))
    ys, xs = np.nonzero(region)
    k = rng.integers(0, len(ys))
    y, x = float(ys[k]), float(xs[k])
    width = rng.integers(1, 3)
    heading = rng.uniform(0.0, 2 * math.pi)
    radius = rng.uniform(3.0, 8.0)
    turn_sign = rng.choice((-1.0, 1.0))

    canvas = Image.new("L", (w, h), 0)
    pen = ImageDraw.Draw(canvas)
    pen.point((int(xs[k]), int(ys[k])), fill=255)
    painted = np.zeros_like(region)
    count = 0
    for _ in range(8 * target + 50):
        fresh = (np.asarray(canvas) > 0) & region & ~painted
        overshoot = int(fresh.sum()) - (target - count)
        if overshoot > 0:
            fresh.reshape(-1)[np.flatnonzero(fresh)[-overshoot:]] = False
        painted |= fresh
        count += int(fresh.sum())
        if count >= target:
            break
        if style is StrokeStyle.LINE:
            heading += rng.uniform(-0.05, 0.05)
        elif style is StrokeStyle.SCRIBBLE:
            heading += rng.uniform(-0.8, 0.8)
        else:
            heading += turn_sign / radius
            radius += 0.05
        for _ in range(12):
            ny, nx = y + math.sin(heading), x + math.cos(heading)
            ry, rx = int(round(ny)), int(round(nx))
            if 0 <= ry < h and 0 <= rx < w and region[ry, rx]:
                pen.line([(int(round(x)), int(round(y))), (rx, ry)], fill=255, width=width)
                y, x = ny, nx
                break
            heading = rng.uniform(0.0, 2 * math.pi)
        else:
            break
    return painted


def scribble_from_dense(
    gt: np.ndarray,
    rng: Rng,
    budget: Optional[int] = None,
    style: Optional[StrokeStyle] = None,
) -> WeakLabelMap:
    """One foreground and one background stroke drawn inside ``gt`` and its complement.

    Raises:
        DataError: If ``gt`` has no foreground or no background pixel.
    """
    gt = np.asarray(gt, dtype=bool)
    if gt.ndim != 2 or not gt.any() or gt.all():
        raise DataError("scribbles need a 2-D mask with both foreground and background pixels")
    if budget is None:
        budget = default_stroke_budget(gt.shape, W_POLYP_LABELED_SHARE, W_POLYP_LABELED_FRACTION)
    states = np.full(gt.shape, LabelState.UNKNOWN, dtype=np.uint8)
    for region, state in ((gt, LabelState.FOREGROUND), (~gt, LabelState.BACKGROUND)):
        stroke_style = style or rng.choice(list(StrokeStyle))
        states[draw_stroke(region, budget, rng, stroke_style)] = state
    return WeakLabelMap(states)


# ---------- dataset ----------


def synthesize_dataset(
    config: SynthConfig,
    out_dir: Path | str,
    rng: Optional[Rng] = None,
    progress: bool = False,
) -> DatasetManifest:
    """Generate, write and return the manifest of a synthetic train/test dataset."""
    out_dir = Path(out_dir)
    rng = rng or Rng(config.seed)
    n_labeled = math.ceil(config.labeled_fraction * config.n_train)
    labeled = set(rng.permutation(config.n_train)[:n_labeled])
    budget = default_stroke_budget((config.size, config.size), config.labeled_share, config.labeled_fraction)

    entries = []
    jobs = [(Split.TRAIN, i) for i in range(config.n_train)] + [(Split.TEST, i) for i in range(config.n_test)]
    for split, i in tqdm(jobs, desc="synth", disable=not progress):
        sample_rng = rng.spawn()
        image, mask = render_sample(sample_rng, config.size)
        trimap = None
        if split is Split.TRAIN and i in labeled:
            trimap = scribble_from_dense(mask, sample_rng, budget)
        sample = Sample(id=f"{split.value}_{i:04d}", image=image, dense_gt=mask, trimap=trimap, split=split)
        entries.append(save_sample(sample, out_dir))

    manifest = DatasetManifest(root=out_dir, entries=entries)
    manifest.write()
    logger.info(
        "synthesized %d train (%d labeled) and %d test samples into %s",
        config.n_train,
        n_labeled,
        config.n_test,
        out_dir,
    )
    return manifest


# ---------- statistics ----------


@dataclass
class LabelStats:
    """Labeled-pixel percentages of the train split.

    ``overall_percent`` counts every train pixel, unlabeled images included; the histogram
    and ``mean_labeled_percent`` cover only images that carry a trimap.
    """

    per_image: dict[str, float]
    histogram: list[tuple[float, float, int]] = field(default_factory=list)
    overall_percent: float = 0.0
    mean_labeled_percent: float = 0.0

    @property
    def overall_share(self) -> float:
        return self.overall_percent / 100.0


def percent_histogram(percents: list[float], width: float = HIST_BIN_PERCENT) -> list[tuple[float, float, int]]:
    if not percents:
        return []
    index = [int(math.floor(p / width)) for p in percents]
    counts = np.bincount(index)
    return [(i * width, (i + 1) * width, int(c)) for i, c in enumerate(counts)]


def labeled_pixel_stats(manifest: DatasetManifest, out_csv: Path | str | None = None) -> LabelStats:
    """Per-image labeled percentage, a 0.5%-bin histogram and the train-split share.

    Raises:
        IoError: If an image or trimap the manifest names is missing.
    """
    per_image: dict[str, float] = {}
    labeled_pixels = 0
    total_pixels = 0
    for entry in manifest.split(Split.TRAIN):
        h, w = image_size(manifest.resolve(entry.image))
        total_pixels += h * w
        if entry.trimap is None:
            continue
        trimap = read_trimap(manifest.resolve(entry.trimap))
        labeled_pixels += trimap.labeled_count
        per_image[entry.id] = 100.0 * trimap.labeled_count / (h * w)

    values = list(per_image.values())
    stats = LabelStats(
        per_image=per_image,
        histogram=percent_histogram(values),
        overall_percent=100.0 * labeled_pixels / total_pixels if total_pixels else 0.0,
        mean_labeled_percent=float(np.mean(values)) if values else 0.0,
    )
    logger.info(
        "labeled pixels: %.2f%% of the train split, %.2f%% per annotated image",
        stats.overall_percent,
        stats.mean_labeled_percent,
    )
    if out_csv is not None:
        write_stats_csv(stats, out_csv)
    return stats


def write_stats_csv(stats: LabelStats, path: Path | str) -> Path:
    rows = [{"kind": "image", "id": i, "percent": p} for i, p in stats.per_image.items()]
    rows += [{"kind": "bin", "bin_low": lo, "bin_high": hi, "count": c} for lo, hi, c in stats.histogram]
    rows.append({"kind": "overall", "id": "train", "percent": f"{stats.overall_percent:.2f}"})
    rows.append({"kind": "mean_labeled", "id": "train", "percent": f"{stats.mean_labeled_percent:.2f}"})
    return write_csv(path, STATS_HEADER, rows)
