import json

import numpy as np
import pytest

from wsdefseg.checkpoint import (
    MAGIC,
    decode_params,
    encode_params,
    load_checkpoint,
    load_model,
    save_checkpoint,
    sidecar_path,
)
from wsdefseg.errors import CheckpointError
from wsdefseg.gradcheck import tiny_model_config
from wsdefseg.network import Role, SegModel
from wsdefseg.utils import file_digest, get_params_by_names


@pytest.fixture
def model() -> SegModel:
    return SegModel(tiny_model_config(), seed=3, role=Role.STUDENT)


def test_round_trip_is_lossless(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.wsds")
    arrays = load_checkpoint(path)
    assert list(arrays) == model.names()
    for name, tensor in model.params.items():
        assert np.array_equal(arrays[name], tensor.data)


def test_load_model_uses_the_sidecar(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.wsds")
    meta = json.loads(sidecar_path(path).read_text())
    assert meta["role"] == "student" and meta["seed"] == 3
    assert meta["digest"] == file_digest(path)
    restored = load_model(path)
    assert restored.role is Role.STUDENT
    assert restored.config == model.config
    for name in model.names():
        assert np.array_equal(restored.params[name].data, model.params[name].data)


def test_same_seed_gives_identical_bytes(tmp_path):
    a = save_checkpoint(SegModel(tiny_model_config(), seed=9), tmp_path / "a.wsds")
    b = save_checkpoint(SegModel(tiny_model_config(), seed=9), tmp_path / "b.wsds")
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        decode_params(b"NOPE" + bytes(8))


def test_truncated_and_trailing_bytes():
    blob = encode_params({"w": np.arange(6, dtype=float).reshape(2, 3)})
    assert blob.startswith(MAGIC)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_params(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_params(blob + b"\x00")


def test_scalar_and_empty_records():
    arrays = decode_params(encode_params({"s": np.array(2.5), "e": np.zeros((0, 3))}))
    assert arrays["s"].shape == () and arrays["s"] == 2.5
    assert arrays["e"].shape == (0, 3)


def test_architecture_mismatch_is_rejected(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.wsds")
    with pytest.raises(CheckpointError):
        load_model(path, config=tiny_model_config(use_dten=False))
    wider = tiny_model_config().model_copy(update={"head_dim": 16})
    with pytest.raises(CheckpointError, match="shape"):
        load_model(path, config=wider)


def test_missing_parameters_are_named(tmp_path):
    small = SegModel(tiny_model_config(use_dten=False), seed=1)
    path = save_checkpoint(small, tmp_path / "small.wsds")
    sidecar_path(path).unlink()
    with pytest.raises(CheckpointError, match="dten"):
        load_model(path, config=tiny_model_config())


def test_unreadable_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.wsds")


def test_get_params_by_names_lists_missing():
    with pytest.raises(CheckpointError, match="'b'"):
        get_params_by_names({"a": 1}, ["a", "b"])
    with pytest.raises(CheckpointError, match=r"\['b', 'd'\]"):
        get_params_by_names({"a": 1}, ["a", "b", "d"])
    assert get_params_by_names({"a": 1, "c": 3}, ["c", "a"]) == [3, 1]
