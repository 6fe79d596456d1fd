import json

import numpy as np
import pytest
from PIL import Image

from wsdefseg.data import (
    MANIFEST_NAME,
    DatasetManifest,
    LabelState,
    ManifestEntry,
    Sample,
    Split,
    WeakLabelMap,
    load_sample,
    read_mask,
    read_trimap,
    save_sample,
)
from wsdefseg.errors import DataError, FormatError, IoError, ShapeError
from wsdefseg.rng import Rng


def random_states(seed: int, shape=(6, 7)) -> np.ndarray:
    return (Rng(seed).random_array(shape) * 3).astype(np.uint8)


def test_trimap_codes_round_trip():
    lab = WeakLabelMap(random_states(1))
    assert WeakLabelMap.from_trimap(lab.to_trimap()) == lab
    assert set(np.unique(lab.to_trimap())) <= {0, 128, 255}


def test_trimap_128_is_unknown():
    lab = WeakLabelMap.from_trimap(np.array([[0, 128, 255]], dtype=np.uint8))
    assert lab.states.tolist() == [[LabelState.BACKGROUND, LabelState.UNKNOWN, LabelState.FOREGROUND]]
    assert lab.labeled_count == 2 and lab.foreground_count == 1


def test_trimap_rejects_other_values(tmp_path):
    path = tmp_path / "bad.png"
    Image.fromarray(np.array([[0, 64], [128, 255]], dtype=np.uint8)).save(path)
    with pytest.raises(FormatError) as err:
        read_trimap(path)
    assert err.value.path == path


def test_label_map_is_immutable_and_validated():
    lab = WeakLabelMap.unknown((2, 2))
    with pytest.raises(ValueError):
        lab.states[0, 0] = 0
    with pytest.raises(DataError):
        WeakLabelMap(np.full((2, 2), 7, dtype=np.uint8))
    with pytest.raises(ShapeError):
        WeakLabelMap(np.zeros(4, dtype=np.uint8))


def test_from_dense_labels_everything():
    lab = WeakLabelMap.from_dense(np.array([[True, False]]))
    assert lab.labeled_share() == 1.0
    np.testing.assert_array_equal(lab.targets, [[1.0, 0.0]])


def test_sample_shapes_must_agree():
    with pytest.raises(ShapeError):
        Sample(id="x", image=np.zeros((3, 4, 4)), dense_gt=np.zeros((4, 5), dtype=bool))
    with pytest.raises(ShapeError):
        Sample(id="x", image=np.zeros((4, 4)))


def test_png_round_trip(tmp_path):
    rng = Rng(2)
    image = np.rint(rng.random_array((3, 8, 8)) * 255) / 255
    gt = rng.random_array((8, 8)) < 0.4
    trimap = WeakLabelMap(random_states(3, (8, 8)))
    entry = save_sample(Sample(id="a", image=image, dense_gt=gt, trimap=trimap), tmp_path)
    manifest = DatasetManifest(root=tmp_path, entries=[entry])
    loaded = load_sample(manifest, entry)
    np.testing.assert_allclose(loaded.image, image, atol=1e-12)
    np.testing.assert_array_equal(loaded.dense_gt, gt)
    assert loaded.trimap == trimap


def test_resized_masks_stay_binary(tmp_path):
    path = tmp_path / "gt.png"
    Image.fromarray(np.kron(np.eye(4, dtype=np.uint8) * 255, np.ones((4, 4), dtype=np.uint8))).save(path)
    mask = read_mask(path, (8, 8))
    assert mask.dtype == bool and mask.shape == (8, 8)


def test_manifest_round_trip(tmp_path):
    image = np.zeros((3, 4, 4))
    entries = [
        save_sample(Sample(id="t0", image=image, trimap=WeakLabelMap.unknown((4, 4))), tmp_path),
        save_sample(Sample(id="t1", image=image), tmp_path),
        save_sample(Sample(id="e0", image=image, dense_gt=np.zeros((4, 4), bool), split=Split.TEST), tmp_path),
    ]
    path = DatasetManifest(root=tmp_path, entries=entries).write()
    assert path == tmp_path / MANIFEST_NAME
    assert json.loads(path.read_text())["root"] == "."
    manifest = DatasetManifest.read(tmp_path)
    assert manifest.root == tmp_path
    assert [e.id for e in manifest.labeled()] == ["t0"]
    assert [e.id for e in manifest.unlabeled()] == ["t1"]
    assert [e.id for e in manifest.split("test")] == ["e0"]
    assert manifest.entry("t1").gt is None
    with pytest.raises(DataError):
        manifest.entry("nope")


def test_manifest_missing_files(tmp_path):
    manifest = DatasetManifest(root=tmp_path, entries=[ManifestEntry(id="a", image="images/a.png")])
    path = manifest.write()
    with pytest.raises(IoError):
        DatasetManifest.read(path)
    assert DatasetManifest.read(path, check_files=False).missing_files() == [tmp_path / "images/a.png"]


def test_manifest_rejects_duplicates_and_bad_json(tmp_path):
    path = tmp_path / MANIFEST_NAME
    entry = {"id": "a", "image": "a.png"}
    path.write_text(json.dumps({"root": ".", "entries": [entry, entry]}))
    with pytest.raises(FormatError, match="duplicate"):
        DatasetManifest.read(path, check_files=False)
    path.write_text("{not json")
    with pytest.raises(FormatError):
        DatasetManifest.read(path)
    with pytest.raises(IoError):
        DatasetManifest.read(tmp_path / "absent.json")
