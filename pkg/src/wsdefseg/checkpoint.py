"""WSDS checkpoint files.

Layout, all integers little-endian u32::

    b"WSDS" | version | record count | records...
    record = name length | utf-8 name | rank | extents... | float64 payload (little-endian)

Each checkpoint ``X.wsds`` has a JSON sidecar ``X.wsds.json`` with the model config,
role, seed and payload digest, so it can be rebuilt without extra arguments.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .errors import CheckpointError
from .network import Role, SegModel
from .tensor import Tensor
from .utils import file_digest, get_params_by_names

logger = logging.getLogger(__name__)

MAGIC = b"WSDS"
FORMAT_VERSION = 1


def encode_params(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, array in params.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError(f"{source}: truncated at byte {offset}")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}")
    offset = 4
    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if offset + name_len > len(blob):
            raise CheckpointError(f"{source}: truncated parameter name at byte {offset}")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(blob):
            raise CheckpointError(f"{source}: truncated payload for {name!r}")
        if n == 0:
            params[name] = np.zeros(shape)
            continue
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - offset} trailing bytes")
    return params


def sidecar_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: SegModel, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params({name: t.data for name, t in model.params.items()}))
    meta = {
        "role": model.role.value,
        "seed": model.seed,
        "digest": file_digest(path),
        "model": model.config.model_dump(mode="json"),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info("saved %s checkpoint %s", model.role.value, path)
    return path


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_params(blob, str(path))


def load_model(path: Path | str, config: Optional[ModelConfig] = None) -> SegModel:
    """Rebuild the architecture (sidecar config unless ``config`` is given) and load weights."""
    path = Path(path)
    role, seed = Role.TEACHER, 0
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
            role, seed = Role(meta["role"]), int(meta["seed"])
            if config is None:
                config = ModelConfig.model_validate(meta["model"])
        except (KeyError, ValueError, ValidationError) as e:
            raise CheckpointError(f"{side}: unreadable sidecar: {e}") from e
    if config is None:
        config = ModelConfig()
    model = SegModel(config, seed=seed, role=role)
    assign_params(model, load_checkpoint(path), str(path))
    return model


def assign_params(model: SegModel, arrays: dict[str, np.ndarray], source: str) -> None:
    extra = sorted(set(arrays) - set(model.params))
    if extra:
        raise CheckpointError(f"{source}: parameters {extra} do not exist in the model")
    loaded = get_params_by_names(arrays, model.names())
    for (name, tensor), array in zip(list(model.params.items()), loaded):
        if array.shape != tensor.shape:
            raise CheckpointError(f"{source}: {name!r} has shape {array.shape}, model expects {tensor.shape}")
    for (name, tensor), array in zip(list(model.params.items()), loaded):
        model.params[name] = Tensor(array, requires_grad=True, name=name)
