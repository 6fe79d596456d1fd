import numpy as np
import pytest

from wsdefseg.config import SynthConfig
from wsdefseg.data import DatasetManifest, Sample, Split, WeakLabelMap, save_sample
from wsdefseg.errors import DataError
from wsdefseg.rng import Rng
from wsdefseg.utils import read_csv
from wsdefseg.wpolyp import (
    StrokeStyle,
    default_stroke_budget,
    draw_stroke,
    labeled_pixel_stats,
    percent_histogram,
    render_sample,
    scribble_from_dense,
    synthesize_dataset,
)


@pytest.fixture(scope="module")
def rendered():
    return render_sample(Rng(8), 64)


def test_render_sample_is_quantized_and_has_both_classes(rendered):
    image, mask = rendered
    assert image.shape == (3, 64, 64)
    np.testing.assert_allclose(image * 255, np.rint(image * 255), atol=1e-9)
    assert mask.any() and not mask.all()


def test_render_is_deterministic():
    a_img, a_mask = render_sample(Rng(3), 32)
    b_img, b_mask = render_sample(Rng(3), 32)
    assert np.array_equal(a_img, b_img) and np.array_equal(a_mask, b_mask)


@pytest.mark.parametrize("style", list(StrokeStyle))
def test_strokes_stay_inside_their_region(rendered, style):
    _, mask = rendered
    painted = draw_stroke(mask, 40, Rng(1), style)
    assert painted.any()
    assert not (painted & ~mask).any()
    assert painted.sum() <= 40


@pytest.mark.parametrize("style", list(StrokeStyle))
def test_stroke_meets_its_budget_exactly_in_open_space(style):
    painted = draw_stroke(np.ones((64, 64), bool), 40, Rng(2), style)
    assert painted.sum() == 40


def test_scribbles_respect_ground_truth(rendered):
    _, mask = rendered
    for seed in range(5):
        lab = scribble_from_dense(mask, Rng(seed), budget=60)
        assert not (lab.foreground_mask & ~mask).any()
        assert not (lab.background_mask & mask).any()
        assert lab.foreground_count > 0 and lab.background_mask.any()


def test_scribbles_are_deterministic(rendered):
    _, mask = rendered
    assert scribble_from_dense(mask, Rng(4)) == scribble_from_dense(mask, Rng(4))


def test_degenerate_masks_are_rejected():
    with pytest.raises(DataError):
        scribble_from_dense(np.zeros((8, 8), bool), Rng(0))
    with pytest.raises(DataError):
        scribble_from_dense(np.ones((8, 8), bool), Rng(0))


def test_default_budget_targets_the_share():
    assert default_stroke_budget((64, 64), 0.02, 0.5) == 82


def test_synthesized_split_is_sparse(tmp_path):
    config = SynthConfig(n_train=40, n_test=4, size=64, seed=2)
    manifest = synthesize_dataset(config, tmp_path)
    assert len(manifest.split(Split.TRAIN)) == 40
    assert len(manifest.labeled()) == 21
    assert all(e.gt is not None for e in manifest.entries)
    stats = labeled_pixel_stats(manifest)
    assert 1.0 <= stats.overall_percent <= 3.0


def test_synthesis_is_deterministic(tmp_path):
    config = SynthConfig(n_train=3, n_test=1, size=32, labeled_fraction=0.7, seed=6)
    a = synthesize_dataset(config, tmp_path / "a")
    b = synthesize_dataset(config, tmp_path / "b")
    assert [e.model_dump() for e in a.entries] == [e.model_dump() for e in b.entries]
    for entry in a.entries:
        assert (a.resolve(entry.image)).read_bytes() == (b.resolve(entry.image)).read_bytes()


def test_stats_for_one_annotated_image(tmp_path):
    states = np.full((64, 64), 2, dtype=np.uint8)
    states.reshape(-1)[:82] = 1
    image = np.zeros((3, 64, 64))
    entries = [save_sample(Sample(id="a", image=image, trimap=WeakLabelMap(states)), tmp_path)]
    manifest = DatasetManifest(root=tmp_path, entries=entries)
    stats = labeled_pixel_stats(manifest, tmp_path / "stats.csv")
    assert stats.per_image["a"] == pytest.approx(2.001953125)
    assert stats.overall_percent == pytest.approx(2.001953125)
    rows = read_csv(tmp_path / "stats.csv")
    assert {"kind": "overall", "id": "train", "percent": "2.00", "bin_low": "", "bin_high": "", "count": ""} in rows
    bins = [r for r in rows if r["kind"] == "bin"]
    assert bins[-1]["bin_low"] == "2.0" and bins[-1]["count"] == "1"


def test_unlabeled_images_dilute_the_overall_share(tmp_path):
    states = np.full((16, 16), 2, dtype=np.uint8)
    states[0, :8] = 0
    image = np.zeros((3, 16, 16))
    entries = [
        save_sample(Sample(id="a", image=image, trimap=WeakLabelMap(states)), tmp_path),
        save_sample(Sample(id="b", image=image), tmp_path),
    ]
    stats = labeled_pixel_stats(DatasetManifest(root=tmp_path, entries=entries))
    assert stats.mean_labeled_percent == pytest.approx(100 * 8 / 256)
    assert stats.overall_percent == pytest.approx(100 * 8 / 512)


def test_percent_histogram_bins():
    assert percent_histogram([]) == []
    assert percent_histogram([0.1, 0.6, 0.7]) == [(0.0, 0.5, 1), (0.5, 1.0, 2)]
