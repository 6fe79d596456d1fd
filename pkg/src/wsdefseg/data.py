"""Weak label maps, samples and the on-disk dataset manifest.

Files referenced by a manifest are PNGs relative to its root:

- images: 8-bit RGB
- dense ground truth: 8-bit grayscale, 0 or 255
- trimaps: 8-bit grayscale, 0 = background, 128 = unknown, 255 = foreground
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DataError, FormatError, IoError, ShapeError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class LabelState(IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    UNKNOWN = 2


TRIMAP_CODES = {LabelState.BACKGROUND: 0, LabelState.UNKNOWN: 128, LabelState.FOREGROUND: 255}
_CODE_TO_STATE = {code: state for state, code in TRIMAP_CODES.items()}


@dataclass(frozen=True, eq=False)
class WeakLabelMap:
    """Per-pixel FOREGROUND / BACKGROUND / UNKNOWN states of one ``[H, W]`` image."""

    states: np.ndarray

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.uint8)
        if states.ndim != 2:
            raise ShapeError(f"label map must be [H, W], got {states.shape}")
        if states.size and states.max() > LabelState.UNKNOWN:
            raise DataError(f"label map holds unknown state codes {sorted(set(np.unique(states)) - {0, 1, 2})}")
        states = states.copy()
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    @classmethod
    def unknown(cls, shape: tuple[int, int]) -> "WeakLabelMap":
        return cls(np.full(shape, LabelState.UNKNOWN, dtype=np.uint8))

    @classmethod
    def from_dense(cls, mask: np.ndarray) -> "WeakLabelMap":
        """Every pixel labeled: FOREGROUND where ``mask`` is set, BACKGROUND elsewhere."""
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, LabelState.FOREGROUND, LabelState.BACKGROUND).astype(np.uint8))

    @classmethod
    def from_trimap(cls, pixels: np.ndarray, path: Path | str = "<trimap>") -> "WeakLabelMap":
        pixels = np.asarray(pixels)
        bad = sorted(set(np.unique(pixels).tolist()) - set(_CODE_TO_STATE))
        if bad:
            raise FormatError(path, f"trimap values must be 0, 128 or 255, found {bad}")
        states = np.full(pixels.shape, LabelState.UNKNOWN, dtype=np.uint8)
        states[pixels == 0] = LabelState.BACKGROUND
        states[pixels == 255] = LabelState.FOREGROUND
        return cls(states)

    def to_trimap(self) -> np.ndarray:
        out = np.full(self.shape, TRIMAP_CODES[LabelState.UNKNOWN], dtype=np.uint8)
        out[self.states == LabelState.BACKGROUND] = TRIMAP_CODES[LabelState.BACKGROUND]
        out[self.states == LabelState.FOREGROUND] = TRIMAP_CODES[LabelState.FOREGROUND]
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.states.shape

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.states != LabelState.UNKNOWN

    @property
    def foreground_mask(self) -> np.ndarray:
        return self.states == LabelState.FOREGROUND

    @property
    def background_mask(self) -> np.ndarray:
        return self.states == LabelState.BACKGROUND

    @property
    def targets(self) -> np.ndarray:
        """1.0 on foreground, 0.0 elsewhere; meaningful only under ``labeled_mask``."""
        return self.foreground_mask.astype(np.float64)

    @property
    def labeled_count(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def foreground_count(self) -> int:
        return int(self.foreground_mask.sum())

    @property
    def has_labels(self) -> bool:
        return self.labeled_count > 0

    def labeled_share(self) -> float:
        return self.labeled_count / self.states.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WeakLabelMap) and np.array_equal(self.states, other.states)


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class Sample:
    """One image with its optional dense ground truth and optional trimap.

    A train sample with a trimap belongs to the labeled set; without one, to the unlabeled set.
    Dense ground truth is read only by evaluation and the fully supervised reference stage.
    """

    id: str
    image: np.ndarray
    dense_gt: Optional[np.ndarray] = None
    trimap: Optional[WeakLabelMap] = None
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"{self.id}: image must be [3, H, W], got {self.image.shape}")
        hw = self.image.shape[1:]
        if self.dense_gt is not None and self.dense_gt.shape != hw:
            raise ShapeError(f"{self.id}: ground truth {self.dense_gt.shape} does not match image {hw}")
        if self.trimap is not None and self.trimap.shape != hw:
            raise ShapeError(f"{self.id}: trimap {self.trimap.shape} does not match image {hw}")

    @property
    def is_labeled(self) -> bool:
        return self.trimap is not None


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., description="Unique sample id.")
    image: str = Field(..., description="RGB PNG, relative to the manifest root.")
    gt: Optional[str] = Field(None, description="Dense mask PNG, relative to the manifest root.")
    trimap: Optional[str] = Field(None, description="Trimap PNG, relative to the manifest root.")
    split: Split = Field(Split.TRAIN, description="train or test.")


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: Path = Field(..., description="Directory the entry paths are relative to.")
    entries: list[ManifestEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        counts = Counter(e.id for e in self.entries)
        dupes = sorted(i for i, n in counts.items() if n > 1)
        if dupes:
            raise ValueError(f"duplicate sample ids {dupes}")
        return self

    def split(self, split: Split | str) -> list[ManifestEntry]:
        split = Split(split)
        return [e for e in self.entries if e.split == split]

    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.split(Split.TRAIN) if e.trimap is not None]

    def unlabeled(self) -> list[ManifestEntry]:
        return [e for e in self.split(Split.TRAIN) if e.trimap is None]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise DataError(f"no sample {sample_id!r} in manifest {self.root}")

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def missing_files(self) -> list[Path]:
        paths = []
        for e in self.entries:
            paths.extend(self.resolve(p) for p in (e.image, e.gt, e.trimap) if p is not None)
        return [p for p in paths if not p.is_file()]

    def write(self, path: Path | str | None = None) -> Path:
        """Write ``manifest.json`` into ``root`` or ``path``; a local ``root`` is stored as ``.``."""
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.model_dump(mode="json")
        payload["root"] = "." if path.parent == self.root else str(self.root)
        path.write_text(json.dumps(payload, indent=2))
        logger.info("wrote manifest %s (%d entries)", path, len(self.entries))
        return path

    @classmethod
    def read(cls, path: Path | str, check_files: bool = True) -> "DatasetManifest":
        """Read a manifest file (or a directory holding ``manifest.json``).

        Raises:
            IoError: If the manifest or any file it names is missing.
            FormatError: If the manifest is not valid JSON for this schema.
        """
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text())
        except OSError as e:
            raise IoError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(path, f"invalid JSON: {e}") from e
        if isinstance(raw, dict):
            raw["root"] = str(path.parent / raw.get("root", "."))
        try:
            manifest = cls.model_validate(raw)
        except ValidationError as e:
            raise FormatError(path, str(e)) from e
        if check_files:
            missing = manifest.missing_files()
            if missing:
                raise IoError(f"manifest {path} refers to missing files: {[str(p) for p in missing[:5]]}")
        return manifest


# ---------- PNG IO ----------


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as e:
        raise IoError(f"missing file {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(path, f"not a readable image: {e}") from e
    return img


def _resize(img: Image.Image, size: Optional[tuple[int, int]], resample: Image.Resampling) -> Image.Image:
    if size is None or (img.height, img.width) == tuple(size):
        return img
    h, w = size
    return img.resize((w, h), resample=resample)


def image_size(path: Path) -> tuple[int, int]:
    """(H, W) of an image file."""
    img = _open(path)
    return img.height, img.width


def read_image(path: Path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """RGB PNG as float ``[3, H, W]`` in [0, 1]; resized bilinearly when ``size`` differs."""
    img = _open(path)
    if img.mode not in ("RGB", "RGBA", "L"):
        raise FormatError(path, f"unsupported image mode {img.mode}")
    img = _resize(img.convert("RGB"), size, Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_mask(path: Path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    img = _open(path)
    if img.mode != "L":
        raise FormatError(path, f"ground truth must be 8-bit grayscale, got mode {img.mode}")
    pixels = np.asarray(_resize(img, size, Image.Resampling.NEAREST))
    bad = sorted(set(np.unique(pixels).tolist()) - {0, 255})
    if bad:
        raise FormatError(path, f"ground truth values must be 0 or 255, found {bad}")
    return pixels == 255


def read_trimap(path: Path, size: Optional[tuple[int, int]] = None) -> WeakLabelMap:
    img = _open(path)
    if img.mode != "L":
        raise FormatError(path, f"trimap must be 8-bit grayscale, got mode {img.mode}")
    return WeakLabelMap.from_trimap(np.asarray(_resize(img, size, Image.Resampling.NEAREST)), path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, size: Optional[tuple[int, int]] = None) -> Sample:
    return Sample(
        id=entry.id,
        image=read_image(manifest.resolve(entry.image), size),
        dense_gt=read_mask(manifest.resolve(entry.gt), size) if entry.gt else None,
        trimap=read_trimap(manifest.resolve(entry.trimap), size) if entry.trimap else None,
        split=entry.split,
    )


def load_split(
    manifest: DatasetManifest, split: Split | str, size: Optional[tuple[int, int]] = None
) -> list[Sample]:
    return [load_sample(manifest, e, size) for e in manifest.split(split)]


def save_sample(sample: Sample, root: Path | str) -> ManifestEntry:
    """Write a sample's PNGs under ``root`` and return its manifest entry."""
    root = Path(root)
    entry = ManifestEntry(id=sample.id, image=f"images/{sample.id}.png", split=sample.split)
    _save(Image.fromarray(to_uint8(sample.image.transpose(1, 2, 0))), root / entry.image)
    if sample.dense_gt is not None:
        entry.gt = f"gt/{sample.id}.png"
        _save(Image.fromarray(np.where(sample.dense_gt, 255, 0).astype(np.uint8)), root / entry.gt)
    if sample.trimap is not None:
        entry.trimap = f"trimaps/{sample.id}.png"
        _save(Image.fromarray(sample.trimap.to_trimap()), root / entry.trimap)
    return entry


def _save(img: Image.Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        img.save(path, format="PNG")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
