import numpy as np
import pytest

from wsdefseg.data import Sample
from wsdefseg.errors import ShapeError
from wsdefseg.gradcheck import TINY_IMAGE, tiny_model_config
from wsdefseg.network import MultiScaleFeatures, Role, SegModel, backbone_forward, predict, predict_samples
from wsdefseg.rng import Rng
from wsdefseg.tensor import Tensor


@pytest.fixture(scope="module")
def image() -> np.ndarray:
    return Rng(3).random_array((3, *TINY_IMAGE))


def test_forward_shape_and_range(image):
    model = SegModel(tiny_model_config(), seed=1)
    out = model.forward(Tensor(image))
    assert out.shape == (1, *TINY_IMAGE)
    assert (out.data > 0).all() and (out.data < 1).all()


def test_backbone_levels_at_strides_16_8_4(image):
    model = SegModel(tiny_model_config(), seed=1)
    feats = backbone_forward(Tensor(image), model.params)
    assert feats.shapes == [(2, 2), (4, 4), (8, 8)]
    assert [m.shape[0] for m in feats.maps] == [6, 5, 4]


def test_extents_must_divide_by_16():
    model = SegModel(tiny_model_config(), seed=1)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((3, 24, 32))))


def test_same_seed_same_parameters():
    a, b = SegModel(tiny_model_config(), seed=4), SegModel(tiny_model_config(), seed=4)
    assert a.names() == b.names()
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.names())
    c = SegModel(tiny_model_config(), seed=5)
    assert not np.array_equal(a.params["backbone.stem.weight"].data, c.params["backbone.stem.weight"].data)


def test_without_neck_has_no_dten_parameters(image):
    model = SegModel(tiny_model_config(use_dten=False), seed=1, role=Role.STUDENT)
    assert not [n for n in model.names() if n.startswith("dten.")]
    assert model.forward(Tensor(image)).shape == (1, *TINY_IMAGE)
    assert model.num_parameters() < SegModel(tiny_model_config(), seed=1).num_parameters()


def test_predict_is_deterministic_in_eval_mode(image):
    model = SegModel(tiny_model_config(), seed=2)
    np.testing.assert_array_equal(predict(model, image), predict(model, image))


def test_training_dropout_changes_the_output(image):
    config = tiny_model_config().model_copy(deep=True)
    config.encoder.dropout_rate = 0.5
    model = SegModel(config, seed=2)
    eval_out = model.forward(Tensor(image)).data
    train_out = model.forward(Tensor(image), training=True, rng=Rng(0)).data
    assert not np.array_equal(eval_out, train_out)


def test_predict_samples_threads_match_serial(image):
    model = SegModel(tiny_model_config(), seed=2)
    samples = [Sample(id=f"s{i}", image=np.roll(image, i, axis=2)) for i in range(4)]
    serial = predict_samples(model, samples, workers=1)
    threaded = predict_samples(model, samples, workers=3)
    assert list(serial) == list(threaded) == ["s0", "s1", "s2", "s3"]
    for key in serial:
        np.testing.assert_array_equal(serial[key], threaded[key])


def test_multiscale_features_validate_levels():
    with pytest.raises(ShapeError):
        MultiScaleFeatures([Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 8, 8)))])
    with pytest.raises(ShapeError):
        MultiScaleFeatures([Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 4, 4)))])


def test_zero_final_conv_predicts_one_half(image):
    model = SegModel(tiny_model_config(), seed=1)
    model.params["head.conv2.weight"].data[...] = 0.0
    model.params["head.conv2.bias"].data[...] = 0.0
    out = model.forward(Tensor(image))
    np.testing.assert_array_equal(out.data, 0.5)


def test_backbone_stages_carry_channel_norm(image):
    model = SegModel(tiny_model_config(), seed=1)
    for block in ("stem", "stage3", "stage2", "stage1"):
        assert f"backbone.{block}.norm.gamma" in model.params
        assert f"backbone.{block}.norm.beta" in model.params
    feats = backbone_forward(Tensor(image), model.params)
    assert all(np.isfinite(m.data).all() for m in feats.maps)
