import csv
import hashlib
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, TypeVar

from .errors import CheckpointError

logger = logging.getLogger(__name__)

T = TypeVar("T")


def get_params_by_names(params: Mapping[str, T], names: Iterable[str]) -> list[T]:
    """Pick the arrays a model expects out of a decoded checkpoint, in the model's parameter order.

    Only names are resolved here; ``checkpoint.assign_params`` rejects extra entries and checks shapes.

    Raises:
        CheckpointError: Naming every parameter the checkpoint lacks.
    """
    names = list(names)
    missing = [name for name in names if name not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}; it holds {sorted(params)}")
    return [params[name] for name in names]


def file_digest(path: Path | str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Write ``rows`` under a fixed ``header``; floats keep full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    logger.info("wrote %s", path)
    return path


def read_csv(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
