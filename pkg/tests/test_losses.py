import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from oracles import autograd_grad, fd_grad, giou_ref, rel_err
from owseg.losses import (LossWeights, ObjectnessVariant, StageLoss, aggregate, box_loss,
                          ccwh_to_xyxy, dice_loss, elementwise_giou, elementwise_iou, focal_loss,
                          objectness_loss)


# --------------------------------------------------------------------------
# focal


def test_focal_examples():
    assert float(focal_loss(torch.tensor(1 - 1e-6), torch.tensor(1.0))) < 1e-12
    v = float(focal_loss(torch.tensor(0.5, dtype=torch.float64), torch.tensor(1.0)))
    assert v == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
    with pytest.raises(ValueError):
        focal_loss(torch.tensor(1.5), torch.tensor(1.0))


def test_focal_gradient_at_half():
    f = lambda p: focal_loss(p, torch.tensor(1.0, dtype=torch.float64)).sum()
    x = torch.tensor([0.5], dtype=torch.float64)
    assert rel_err(autograd_grad(f, x), fd_grad(f, x)) < 1e-5


def test_focal_target_zero_formula():
    p = torch.tensor(0.3, dtype=torch.float64)
    expected = -(0.75) * 0.3 ** 2 * math.log(0.7)
    assert float(focal_loss(p, torch.tensor(0.0))) == pytest.approx(expected, rel=1e-12)


# --------------------------------------------------------------------------
# box


def test_box_loss_identity_and_disjoint():
    b = torch.tensor([[0.4, 0.5, 0.2, 0.3]])
    l1, giou = box_loss(b, b)
    assert float(l1) == 0 and float(giou) == pytest.approx(0, abs=1e-7)
    # [0,0,1,1] and [2,2,3,3] in a 3x3 image, normalized
    a = torch.tensor([[0.5, 0.5, 1.0, 1.0]], dtype=torch.float64) / 3
    c = torch.tensor([[2.5, 2.5, 1.0, 1.0]], dtype=torch.float64) / 3
    _, giou = box_loss(a, c, LossWeights(lambda_giou=2.0))
    assert float(giou) == pytest.approx(2.0 * (1 + 7 / 9), rel=1e-9)


def test_box_loss_defaults_match_reported_weights():
    w = LossWeights()
    assert (w.lambda_reg, w.lambda_giou) == (5.0, 2.0)


def test_l1_term_formula():
    pred = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
    gt = torch.tensor([[0.4, 0.6, 0.3, 0.1]], dtype=torch.float64)
    l1, _ = box_loss(pred, gt, LossWeights(lambda_reg=5.0))
    assert float(l1) == pytest.approx(5.0 * 0.4)


def test_elementwise_giou_matches_scalar_oracle(rng):
    a = torch.tensor(rng.uniform(0, 1, (200, 4)))
    b = torch.tensor(rng.uniform(0, 1, (200, 4)))
    a = torch.cat([torch.minimum(a[:, :2], a[:, 2:]), torch.maximum(a[:, :2], a[:, 2:])], 1)
    b = torch.cat([torch.minimum(b[:, :2], b[:, 2:]), torch.maximum(b[:, :2], b[:, 2:])], 1)
    got = elementwise_giou(a, b)
    for i in range(200):
        assert float(got[i]) == pytest.approx(giou_ref(a[i].tolist(), b[i].tolist()), abs=1e-12)


# --------------------------------------------------------------------------
# dice


def test_dice_examples():
    gt = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    assert float(dice_loss(gt.clone(), gt)) == 0.0
    zeros = torch.zeros(2, 2)
    assert float(dice_loss(zeros, gt, smooth=1.0)) == pytest.approx(1 - 1 / (3 + 1))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(2, 3), gt)


def test_dice_zero_iff_equal():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    for bits in range(16):
        pred = torch.tensor([(bits >> i) & 1 for i in range(4)], dtype=torch.float32).view(2, 2)
        loss = float(dice_loss(pred, gt, smooth=0.0 if pred.sum() or gt.sum() else 1e-4))
        assert (loss == 0.0) == torch.equal(pred, gt)


# --------------------------------------------------------------------------
# objectness


def test_objectness_examples():
    assert float(objectness_loss("void")) == 0.0
    v = objectness_loss("box", p_b=torch.tensor([0.9]), p_b_target=torch.tensor([0.7]),
                        weights=LossWeights(lambda_box_iou=1.0))
    assert float(v) == pytest.approx(0.2)
    v = objectness_loss("fusion", p_b=torch.tensor([0.6]), p_b_target=torch.tensor([0.5]),
                        p_m=torch.tensor([0.3]), p_m_target=torch.tensor([0.4]),
                        weights=LossWeights(lambda_box_iou=1.0, lambda_mask_iou=1.0))
    assert float(v) == pytest.approx(0.2)
    v = objectness_loss("mask", p_m=torch.tensor([0.2]), p_m_target=torch.tensor([0.5]),
                        weights=LossWeights(lambda_mask_iou=2.0))
    assert float(v) == pytest.approx(0.6)


def test_objectness_cls_uses_focal():
    p = torch.tensor([0.5, 0.2])
    t = torch.tensor([1.0, 0.0])
    v = objectness_loss("cls", p_c=p, p_c_target=t, weights=LossWeights(lambda_cls=2.0))
    assert float(v) == pytest.approx(2.0 * float(focal_loss(p, t).sum()))


def test_void_objectness_has_no_gradient():
    v = objectness_loss(ObjectnessVariant.VOID, p_b=torch.tensor([0.5], requires_grad=True))
    assert v.grad_fn is None and not v.requires_grad


def test_out_of_range_scores_are_clamped(caplog):
    v = objectness_loss("box", p_b=torch.tensor([1.2]), p_b_target=torch.tensor([0.5]))
    assert float(v) == pytest.approx(0.5)
    assert "clamping" in caplog.text


def test_iou_targets_carry_no_gradient(rng):
    gt = torch.tensor(rng.uniform(0.2, 0.4, (5, 4)))
    pred = (gt + torch.tensor(rng.uniform(-0.05, 0.05, (5, 4)))).requires_grad_(True)
    score = torch.tensor(rng.uniform(0, 1, 5), requires_grad=True)

    def grads(target_fn):
        pred.grad = score.grad = None
        target = target_fn()
        l1, giou = box_loss(pred, gt)
        loss = l1.sum() + giou.sum() + objectness_loss("box", p_b=score, p_b_target=target)
        loss.backward()
        return pred.grad.clone(), score.grad.clone()

    live = grads(lambda: elementwise_iou(ccwh_to_xyxy(pred), ccwh_to_xyxy(gt)))
    frozen = grads(lambda: elementwise_iou(ccwh_to_xyxy(pred), ccwh_to_xyxy(gt)).detach())
    shifted = grads(lambda: (elementwise_iou(ccwh_to_xyxy(pred), ccwh_to_xyxy(gt)) * 0 + 0.0))
    assert torch.equal(live[0], frozen[0]) and torch.equal(live[1], frozen[1])
    # a target that differs only by value changes the score gradient but never the box gradient
    assert torch.equal(live[0], shifted[0])


# --------------------------------------------------------------------------
# aggregation


def test_aggregate_examples():
    stages = [StageLoss(0.25, 0.25, 0.25, 0.25) for _ in range(6)]
    assert aggregate(stages, 6).total == 6.0
    one = aggregate([StageLoss(0.1, 0.2, 0.3, 0.4)], 1)
    assert one.total == pytest.approx(1.0)
    with pytest.raises(ValueError):
        aggregate(stages, 5)


def test_aggregate_matches_exact_sum(rng):
    for _ in range(50):
        n = int(rng.integers(1, 8))
        vals = rng.uniform(0, 10, (n, 4))
        b = aggregate([StageLoss(*row) for row in vals], n)
        exact = sum(Fraction(float(v)) for v in vals.ravel())
        assert b.total == float(exact)
        rec = b.to_record()
        assert rec["total"] == b.total and len(rec) == 1 + 4 * n


def test_aggregate_keeps_graph():
    x = torch.tensor(2.0, requires_grad=True)
    b = aggregate([StageLoss(x, x * 2, 0.0, 0.0), StageLoss(x, 0.0, 0.0, x)], 2)
    b.total_tensor.backward()
    assert float(x.grad) == 5.0
    assert b.total == pytest.approx(10.0)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_mask=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_reg=float("inf"))
