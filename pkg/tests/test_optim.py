import numpy as np
import pytest

from wsdefseg.config import SgdConfig
from wsdefseg.errors import NumericsError
from wsdefseg.optim import Sgd, clip_grad_norm, sgd_step
from wsdefseg.tensor import Tensor

CFG = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.1, batch_size=1)


def test_two_momentum_steps_by_hand():
    params = {"p": Tensor([1.0], requires_grad=True)}
    velocity = {}
    sgd_step(params, {"p": np.array([0.5])}, velocity, CFG)
    assert params["p"].data[0] == pytest.approx(0.94)
    assert velocity["p"][0] == pytest.approx(0.6)
    sgd_step(params, {"p": np.array([0.5])}, velocity, CFG)
    assert params["p"].data[0] == pytest.approx(0.8266)


def test_missing_gradient_still_decays():
    params = {"p": Tensor([2.0], requires_grad=True)}
    sgd_step(params, {}, {}, CFG)
    assert params["p"].data[0] == pytest.approx(2.0 - 0.1 * 0.1 * 2.0)


def test_non_finite_gradient_aborts_before_any_update():
    params = {"a": Tensor([1.0], requires_grad=True), "b": Tensor([1.0], requires_grad=True)}
    velocity = {}
    with pytest.raises(NumericsError, match="b"):
        sgd_step(params, {"a": np.array([1.0]), "b": np.array([np.nan])}, velocity, CFG)
    assert params["a"].data[0] == 1.0 and not velocity


def test_sgd_reads_grads_and_decays_lr():
    params = {"w": Tensor([1.0, -1.0], requires_grad=True)}
    opt = Sgd(
        params, SgdConfig(learning_rate=0.05, momentum=0.0, weight_decay=0.0, lr_decay=0.95, max_grad_norm=None)
    )
    params["w"].grad = np.array([1.0, 1.0])
    opt.step()
    np.testing.assert_allclose(params["w"].data, [0.95, -1.05])
    assert params["w"].requires_grad and params["w"].grad is None
    assert opt.end_epoch() == pytest.approx(0.0475)
    assert opt.steps == 1


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SgdConfig(batch_size=0)
    with pytest.raises(ValueError):
        SgdConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        SgdConfig(max_grad_norm=0.0)


def test_clip_grad_norm_scales_jointly():
    grads = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert grads["a"][0] == pytest.approx(0.6) and grads["b"][0] == pytest.approx(0.8)
    assert grads["c"] is None


def test_clip_grad_norm_leaves_small_gradients():
    grads = {"a": np.array([0.3, 0.4])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(grads["a"], [0.3, 0.4])


def test_sgd_clips_before_stepping():
    params = {"w": Tensor([0.0, 0.0], requires_grad=True)}
    opt = Sgd(params, SgdConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.0, max_grad_norm=1.0))
    params["w"].grad = np.array([30.0, 40.0])
    opt.step()
    np.testing.assert_allclose(params["w"].data, [-0.6, -0.8])
