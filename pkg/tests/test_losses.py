import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import BIG, annotation, perfect_prediction, prediction
from lqseg import tensor as T
from lqseg.losses import (
    LossReport,
    LossWeights,
    attribute_loss,
    bce_elementwise,
    dice_loss,
    focal_elementwise,
    focal_loss,
    stage_loss,
    total_loss,
)
from lqseg.matching import Assignment, cost_matrix, hungarian
from lqseg.tensor import ContractError, Tensor, finite_diff_check

RNG = np.random.default_rng(3)


class TestFocal:
    def test_confident_correct_limit(self):
        assert focal_loss(Tensor([30.0]), [1.0]).item() < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6,), elements=st.floats(-20, 20)),
           arrays(np.int64, (6,), elements=st.integers(0, 1)))
    def test_gamma_zero_is_half_bce(self, z, t):
        f = focal_elementwise(Tensor(z), t, alpha=0.5, gamma=0.0).data
        b = bce_elementwise(Tensor(z), t).data
        assert np.all(np.abs(f - 0.5 * b) <= 1e-12)

    def test_zero_logit_positive_target(self):
        expected = 0.25 * 0.5**2 * math.log(2)
        assert focal_loss(Tensor([0.0]), [1.0]).item() == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.043321, abs=1e-6)

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ContractError):
            focal_loss(Tensor([0.0]), [0.5])

    def test_gradient(self):
        z = Tensor(RNG.uniform(-3, 3, (4, 5)), requires_grad=True)
        t = RNG.integers(0, 2, (4, 5))
        assert finite_diff_check(lambda x: focal_loss(x, t), z) < 1e-5


class TestDice:
    def test_identical_saturated(self):
        g = np.zeros((4, 4))
        g[1:3, 1:3] = 1
        assert dice_loss(Tensor(np.where(g > 0, BIG, -BIG)), g).item() < 1e-3

    def test_disjoint_limit(self):
        g = np.zeros((4, 4))
        g[0, :2] = 1
        p = np.full((4, 4), -BIG)
        p[3, :2] = BIG
        area = 2
        assert dice_loss(Tensor(p), g).item() == pytest.approx(1 - 1 / (2 * area + 1), abs=1e-9)

    def test_hand_case(self):
        assert dice_loss(Tensor(np.zeros((2, 2))), [[1, 0], [0, 0]]).item() == pytest.approx(0.5)

    def test_per_mask_mean(self):
        z = RNG.normal(size=(3, 4, 4))
        g = RNG.integers(0, 2, (3, 4, 4))
        per = dice_loss(Tensor(z), g, per_mask=True).data
        singles = [dice_loss(Tensor(z[k]), g[k]).item() for k in range(3)]
        assert np.allclose(per, singles)
        assert dice_loss(Tensor(z), g).item() == pytest.approx(np.mean(singles))

    def test_gradient(self):
        z = Tensor(RNG.uniform(-3, 3, (2, 3, 3)), requires_grad=True)
        g = RNG.integers(0, 2, (2, 3, 3))
        assert finite_diff_check(lambda x: dice_loss(x, g), z) < 1e-5


class TestAttribute:
    def test_perfect(self):
        t = np.array([[1, 0, 1], [0, 0, 1]])
        assert attribute_loss(Tensor(np.where(t > 0, BIG, -BIG)), t).item() < 1e-12

    def test_uninformative(self):
        assert attribute_loss(Tensor(np.zeros((3, 4))), np.eye(3, 4)).item() == pytest.approx(math.log(2))

    def test_hand_case(self):
        z = np.array([[0.3, -1.2, 2.0], [-0.5, 0.1, 1.5]])
        t = np.array([[1, 0, 1], [0, 1, 0]])
        sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
        cells = [-(math.log(sig(a)) if y else math.log(1 - sig(a)))
                 for a, y in zip(z.ravel(), t.ravel())]
        assert attribute_loss(Tensor(z), t).item() == pytest.approx(np.mean(cells), rel=1e-14)

    def test_gradient(self):
        z = Tensor(RNG.uniform(-3, 3, (2, 9)), requires_grad=True)
        t = RNG.integers(0, 2, (2, 9))
        assert finite_diff_check(lambda x: attribute_loss(x, t), z) < 1e-5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-10, 10)),
       arrays(np.int64, (2, 3, 3), elements=st.integers(0, 1)))
def test_components_are_non_negative(z, t):
    assert focal_loss(Tensor(z), t).item() >= 0
    assert dice_loss(Tensor(z), t).item() >= 0
    assert attribute_loss(Tensor(z.reshape(2, 9)), t.reshape(2, 9)).item() >= 0


def scene():
    masks = np.zeros((2, 16, 16), dtype=bool)
    masks[0, 2:8, 2:10] = True
    masks[1, 10:15, 4:14] = True
    attrs = np.zeros((2, 9), dtype=np.uint8)
    attrs[0, [1, 3, 6]] = 1
    attrs[1, [0, 4, 8]] = 1
    return annotation(masks, [1, 3], attrs)


def test_perfect_prediction_total_is_near_zero():
    ann = scene()
    stages = [perfect_prediction(ann, 6, rows=[4, 2]) for _ in range(3)]
    asg = [hungarian(cost_matrix(s, ann)) for s in stages]
    loss, report = total_loss(stages, ann, asg)
    assert loss.item() < 1e-3
    assert report.total == loss.item()


def test_report_composition_and_mask_weight_doubling():
    ann = scene()
    stages = [prediction(RNG.normal(size=(6, 16, 16)), RNG.normal(size=(6, 5)),
                         RNG.normal(size=(6, 9))) for _ in range(3)]
    asg = [hungarian(cost_matrix(s, ann)) for s in stages]
    _, base = total_loss(stages, ann, asg)
    assert base.total == pytest.approx(base.recompute_total(), rel=1e-12)
    _, doubled = total_loss(stages, ann, asg, weights=LossWeights(mask=2.0))
    mask_part = sum(f + d for f, d in zip(base.focal, base.dice))
    assert doubled.total - base.total == pytest.approx(mask_part, rel=1e-12)


def test_single_instance_hand_composed():
    mask = np.zeros((1, 8, 8), dtype=bool)
    mask[0, 2:5, 3:7] = True
    attrs = np.zeros((1, 9), dtype=np.uint8)
    attrs[0, [2, 3, 5]] = 1
    ann = annotation(mask, [0], attrs)
    z = RNG.normal(size=(2, 8, 8))
    c = RNG.normal(size=(2, 5))
    a = RNG.normal(size=(2, 9))
    pred = prediction(z, c, a)
    asg = Assignment([(1, 0)])
    loss, report = total_loss([pred], ann, [asg], expected_stages=1)

    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731

    def focal(x, t):
        p = sig(x)
        return np.where(t > 0, -0.25 * (1 - p) ** 2 * np.log(p), -0.75 * p**2 * np.log(1 - p))

    onehot = np.zeros((2, 5))
    onehot[0, 4] = 1
    onehot[1, 0] = 1
    cls = focal(c, onehot).sum() / (5 * 1)
    g = mask[0].astype(float)
    fm = focal(z[1], g).mean()
    p = sig(z[1])
    dice = 1 - (2 * (p * g).sum() + 1) / (p.sum() + g.sum() + 1)
    t = attrs[0]
    attr = -np.mean(np.where(t > 0, np.log(sig(a[1])), np.log(1 - sig(a[1]))))
    assert report.cls[0] == pytest.approx(cls, rel=1e-12)
    assert report.focal[0] == pytest.approx(fm, rel=1e-12)
    assert report.dice[0] == pytest.approx(dice, rel=1e-12)
    assert report.attr[0] == pytest.approx(attr, rel=1e-12)
    assert loss.item() == pytest.approx(cls + fm + dice + attr, rel=1e-12)


def test_mask_loss_upsamples_logits_to_image_resolution():
    mask = np.zeros((1, 16, 16), dtype=bool)
    mask[0, 4:12, 4:12] = True
    ann = annotation(mask, [0])
    z = RNG.normal(size=(1, 4, 4))
    pred = prediction(z, np.zeros((1, 5)), np.zeros((1, 9)))
    _, focal, dice, _ = stage_loss(pred, ann, Assignment([(0, 0)]))
    up = T.resize_bilinear(Tensor(z), 16, 16)
    assert focal.item() == pytest.approx(focal_loss(up, mask.astype(float)).item(), rel=1e-12)
    assert dice.item() == pytest.approx(dice_loss(up, mask.astype(float)).item(), rel=1e-12)


def test_no_gt_only_class_loss():
    ann = annotation(np.zeros((0, 8, 8)), [])
    pred = prediction(RNG.normal(size=(3, 8, 8)), RNG.normal(size=(3, 5)), RNG.normal(size=(3, 9)))
    cls, focal, dice, attr = stage_loss(pred, ann, Assignment([]))
    assert cls.item() > 0 and focal.item() == dice.item() == attr.item() == 0


def test_wrong_stage_count_rejected():
    ann = scene()
    s = perfect_prediction(ann, 4)
    with pytest.raises(ContractError):
        total_loss([s, s], ann, [hungarian(cost_matrix(s, ann))] * 2)


def test_total_loss_gradient():
    ann = scene()
    z = RNG.normal(size=(4, 8, 8))
    c = RNG.normal(size=(4, 5))
    a = RNG.normal(size=(4, 9))
    asg = Assignment([(0, 1), (2, 0)])

    def f(x):
        pred = prediction(z, c, a)
        pred.mask_logits = x
        return total_loss([pred], ann, [asg], expected_stages=1)[0]

    x = Tensor(z, requires_grad=True)
    assert finite_diff_check(f, x) < 1e-5


def test_log_record_and_average():
    r1 = LossReport([1.0], [2.0], [3.0], [4.0], total=10.0)
    r2 = LossReport([3.0], [2.0], [1.0], [0.0], total=6.0)
    avg = LossReport.average([r1, r2])
    assert avg.cls == [2.0] and avg.total == 8.0
    rec = avg.log_record(7, 1e-4)
    assert set(rec) == {"iter", "total", "cls", "focal", "dice", "attr", "lr"}
