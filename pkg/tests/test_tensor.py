import numpy as np
import pytest

from wsdefseg import ops
from wsdefseg.errors import NumericsError, ShapeError
from wsdefseg.tensor import Tape, Tensor, active_tape


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_tape_means_constants():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ops.mul(x, x)
    assert not y.requires_grad


def test_tape_context_is_scoped():
    assert active_tape() is None
    with Tape() as tape:
        assert active_tape() is tape
    assert active_tape() is None


def test_fan_out_gradients_accumulate():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(ops.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_operator_sugar_matches_ops():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.sum((a * 3.0 - 1.0) + (2.0 - a) * a)
    tape.backward(y)
    np.testing.assert_allclose(y.item(), (3 * a.data - 1 + (2 - a.data) * a.data).sum())
    np.testing.assert_allclose(a.grad, 3.0 + 2.0 - 2 * a.data)


def test_grads_reach_only_leaves_requiring_them():
    w = Tensor([2.0], requires_grad=True)
    c = Tensor([5.0])
    with Tape() as tape:
        y = ops.sum(ops.mul(w, c))
    tape.backward(y)
    assert w.grad is not None and c.grad is None
    assert w.grad[0] == 5.0


def test_backward_needs_scalar_or_seed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)
    tape.backward(y, seed=np.array([1.0, 1.0]))
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_repeated_backward_accumulates_until_zeroed():
    x = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = ops.sum(ops.mul(x, 3.0))
        tape.backward(y)
    assert x.grad[0] == 6.0
    x.zero_grad()
    assert x.grad is None


def test_item_requires_single_element():
    assert Tensor([[4.0]]).item() == 4.0
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_non_finite_results_raise():
    with np.errstate(over="ignore"):
        with pytest.raises(NumericsError):
            ops.mul(Tensor([1e308]), 10.0)


def test_detach_drops_grad_tracking():
    x = Tensor([1.0], requires_grad=True)
    assert not x.detach().requires_grad
