import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsdefseg import ops
from wsdefseg.data import LabelState, WeakLabelMap
from wsdefseg.errors import ConfigError, ShapeError
from wsdefseg.losses import (
    BRANCH_LABELED,
    BRANCH_UNLABELED,
    consistency_loss,
    dense_loss,
    partial_ce,
    semi_loss,
    sparse_foreground_loss,
    weak_loss,
)
from wsdefseg.rng import Rng
from wsdefseg.tensor import Tape, Tensor

LN2 = math.log(2.0)
FG, BG, UNK = LabelState.FOREGROUND, LabelState.BACKGROUND, LabelState.UNKNOWN


def labels(rows) -> WeakLabelMap:
    return WeakLabelMap(np.array(rows, dtype=np.uint8))


def half(shape=(2, 2)) -> Tensor:
    return Tensor(np.full((1, *shape), 0.5))


SCRIBBLE = labels([[FG, UNK], [BG, UNK]])


def test_partial_ce_at_one_half_is_ln2():
    assert partial_ce(half(), SCRIBBLE).item() == pytest.approx(LN2, abs=1e-12)


def test_sparse_foreground_at_one_half_is_ln2():
    assert sparse_foreground_loss(half(), SCRIBBLE).item() == pytest.approx(LN2, abs=1e-12)


def test_weak_loss_combines_with_alpha():
    report = weak_loss(half(), SCRIBBLE, alpha=0.5)
    assert report.total == pytest.approx(1.5 * LN2, abs=1e-12)
    assert report.total == pytest.approx(1.0397, abs=1e-4)
    assert report.components["l_p"] == pytest.approx(LN2, abs=1e-12)
    assert report.branch == BRANCH_LABELED


def test_semi_loss_labeled_branch():
    teacher = np.full((1, 2, 2), 0.3)
    report = semi_loss([half()], [teacher], [SCRIBBLE], alpha=0.5, beta1=0.1, beta2=0.5)
    assert report.components["l_c"] == pytest.approx(0.2, abs=1e-12)
    assert report.total == pytest.approx(1.5 * LN2 + 0.1 * 0.2, abs=1e-12)
    assert report.batch_had_labels


def test_semi_loss_unlabeled_branch():
    teacher = np.full((1, 2, 2), 0.3)
    report = semi_loss([half(), half()], [teacher, teacher], [None, None], alpha=0.5, beta1=0.1, beta2=0.5)
    assert report.total == pytest.approx(0.1, abs=1e-12)
    assert report.branch == BRANCH_UNLABELED
    assert report.components["l_weak"] == 0.0


def test_semi_loss_mixed_batch_uses_labeled_samples_for_weak_part():
    teacher = np.full((1, 2, 2), 0.3)
    other = Tensor(np.full((1, 2, 2), 0.7))
    report = semi_loss([half(), other], [teacher, teacher], [SCRIBBLE, None], alpha=0.5, beta1=0.1, beta2=0.5)
    assert report.components["l_weak"] == pytest.approx(1.5 * LN2, abs=1e-12)
    assert report.components["l_c"] == pytest.approx(0.3, abs=1e-12)
    assert report.total == pytest.approx(1.5 * LN2 + 0.03, abs=1e-12)


def test_images_weigh_equally():
    sparse = labels([[FG, UNK], [UNK, UNK]])
    dense = labels([[FG, FG], [FG, FG]])
    preds = [half(), Tensor(np.full((1, 2, 2), 0.9))]
    expected = (LN2 - math.log(0.9)) / 2
    assert partial_ce(preds, [sparse, dense]).item() == pytest.approx(expected, abs=1e-12)


def test_no_labels_gives_zero_without_gradient():
    pred = Tensor(np.full((1, 2, 2), 0.4), requires_grad=True)
    with Tape():
        loss = partial_ce(pred, WeakLabelMap.unknown((2, 2)))
    assert loss.item() == 0.0 and not loss.requires_grad
    assert sparse_foreground_loss(pred, labels([[BG, BG], [UNK, UNK]])).item() == 0.0


@settings(max_examples=100)
@given(st.integers(min_value=0, max_value=2**32))
def test_unknown_pixels_do_not_matter(seed):
    rng = Rng(seed)
    states = np.select([rng.random_array((5, 6)) < 0.15, rng.random_array((5, 6)) < 0.3], [FG, BG], UNK)
    lab = WeakLabelMap(states.astype(np.uint8))
    pred = rng.uniform_array(0.01, 0.99, (1, 5, 6))
    changed = np.where(lab.labeled_mask[None], pred, rng.uniform_array(0.01, 0.99, (1, 5, 6)))
    a = weak_loss(Tensor(pred), lab, alpha=0.5)
    b = weak_loss(Tensor(changed), lab, alpha=0.5)
    assert a.total == b.total
    assert a.components == b.components


def test_gradient_is_zero_on_unknown_pixels():
    pred = Tensor(np.full((1, 2, 2), 0.3), requires_grad=True)
    with Tape() as tape:
        report = weak_loss(pred, SCRIBBLE)
    tape.backward(report.tensor)
    assert pred.grad[0, 0, 1] == 0.0 and pred.grad[0, 1, 1] == 0.0
    assert pred.grad[0, 0, 0] < 0.0 < pred.grad[0, 1, 0]


def test_consistency_does_not_push_gradient_into_teacher():
    student = Tensor(np.full((1, 2, 2), 0.6), requires_grad=True)
    teacher = Tensor(np.full((1, 2, 2), 0.2), requires_grad=True)
    with Tape() as tape:
        loss = consistency_loss(student, teacher)
    tape.backward(loss)
    assert loss.item() == pytest.approx(0.4)
    assert teacher.grad is None
    np.testing.assert_allclose(student.grad, 0.25)


def test_dense_loss_labels_every_pixel():
    mask = np.array([[True, False], [False, True]])
    pred = Tensor(np.array([[[0.8, 0.2], [0.2, 0.8]]]))
    assert dense_loss(pred, mask).total == pytest.approx(-math.log(0.8), abs=1e-12)


def test_negative_alpha_is_a_config_error():
    with pytest.raises(ConfigError):
        weak_loss(half(), SCRIBBLE, alpha=-0.1)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        partial_ce(half((3, 3)), SCRIBBLE)
    with pytest.raises(ShapeError):
        consistency_loss([half(), half()], [np.zeros((1, 2, 2))])


def test_saturated_background_pixel_still_gets_gradient():
    logits = Tensor(np.array([[[40.0, 0.0]]]), requires_grad=True)
    with Tape() as tape:
        loss = partial_ce(ops.sigmoid(logits), labels([[BG, BG]]))
    tape.backward(loss)
    np.testing.assert_allclose(logits.grad, [[[0.5, 0.25]]], rtol=1e-6)


def test_single_prediction_with_listed_labels():
    teacher = np.full((1, 2, 2), 0.3)
    report = semi_loss(half(), [teacher], [SCRIBBLE], alpha=0.5, beta1=0.1, beta2=0.5)
    assert report.total == pytest.approx(1.5 * LN2 + 0.1 * 0.2, abs=1e-12)


def test_semi_loss_without_weak_term_uses_consistency_alone():
    teacher = np.full((1, 2, 2), 0.3)
    report = semi_loss([half()], [teacher], [SCRIBBLE], alpha=0.5, beta1=0.1, beta2=0.5, weak=False)
    assert report.total == pytest.approx(0.1, abs=1e-12)
    assert report.components["l_weak"] == 0.0
    assert report.batch_had_labels


def test_semi_loss_label_count_mismatch():
    with pytest.raises(ShapeError):
        semi_loss([half(), half()], [np.zeros((1, 2, 2))] * 2, [SCRIBBLE])
