import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from polydvps.assignloss import (
    GtSet,
    LossWeights,
    depth_loss,
    gt_from_frame,
    hungarian_match,
    mask_cls_loss,
    match_cost,
    matched_depth_loss,
    softmax_focal,
    stage_loss,
    total_loss,
)

from . import oracles


def _cost_of(cost, a):
    return sum(cost[a[m], m] for m in range(len(a)))


def test_hungarian_identity_and_examples():
    c = np.full((4, 4), 5.0)
    np.fill_diagonal(c, 0.0)
    assert hungarian_match(c).tolist() == [0, 1, 2, 3]
    c = np.array([[1, 2, 3], [2, 4, 6], [3, 6, 9]], dtype=float)
    assert math.isclose(_cost_of(c, hungarian_match(c)), oracles.best_assignment(c))
    col = np.array([[3.0], [1.0], [2.0]])
    assert hungarian_match(col).tolist() == [1]


def test_hungarian_uniform_cost_is_valid():
    a = hungarian_match(np.ones((5, 3)))
    assert len(set(a.tolist())) == 3


def test_hungarian_errors():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian_match(np.array([[0.0, np.nan], [1.0, 2.0]]))
    assert hungarian_match(np.zeros((3, 0))).shape == (0,)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_hungarian_optimal_property(n, m, seed):
    m = min(m, n)
    cost = np.random.default_rng(seed).normal(size=(n, m))
    a = hungarian_match(cost)
    assert len(set(a.tolist())) == m
    assert _cost_of(cost, a) <= oracles.best_assignment(cost) + 1e-9


def test_match_cost_scalar_oracle():
    rng = np.random.default_rng(0)
    w = LossWeights()
    for _ in range(10):
        ml = rng.normal(size=(4, 3, 3))
        cl = rng.normal(size=(4, 4))
        gm = (rng.random((2, 3, 3)) < 0.5).astype(float)
        gc = rng.integers(0, 3, size=2)
        out = match_cost(torch.from_numpy(ml), torch.from_numpy(cl), torch.from_numpy(gm), torch.from_numpy(gc), w).numpy()
        ref = oracles.match_cost(ml, cl, gm, gc, w.cost_cls, w.cost_dice, w.cost_bce, w.dice_eps)
        np.testing.assert_allclose(out, ref, atol=1e-6)


def test_match_cost_perfect_prediction_has_minimal_diagonal():
    gm = torch.zeros(3, 4, 4, dtype=torch.float64)
    gm[0, :2], gm[1, 2:, :2], gm[2, 2:, 2:] = 1, 1, 1
    gc = torch.tensor([0, 1, 2])
    ml = (gm * 2 - 1) * 20
    cl = torch.full((3, 4), -10.0, dtype=torch.float64)
    cl[torch.arange(3), gc] = 10.0
    cost = match_cost(ml, cl, gm, gc, LossWeights()).numpy()
    for m in range(3):
        assert np.argmin(cost[:, m]) == m
        assert all(cost[m, m] < cost[n, m] for n in range(3) if n != m)


def test_depth_loss_examples():
    gt = torch.tensor([[1.0, 4.0]], dtype=torch.float64)
    valid = torch.ones_like(gt, dtype=torch.bool)
    loss, ok = depth_loss(gt.clone(), gt, valid)
    assert ok and loss.item() == 0.0
    # constant log offset 1: mean(d^2) - 0.5 mean(d)^2 = 0.5
    pe = gt * math.e
    loss, _ = depth_loss(pe, gt, valid, si=0.5)
    ar = (math.e - 1)
    sr = ((math.e - 1) ** 2 * (1 + 4)) / 2
    assert math.isclose(loss.item(), 0.5 + ar + sr, rel_tol=1e-12)
    p = torch.tensor([[2.0, 4.0]], dtype=torch.float64)
    loss, _ = depth_loss(p, gt, valid, si=0.5)
    d = math.log(2)
    si = d * d / 2 - 0.5 * (d / 2) ** 2
    assert math.isclose(loss.item(), si + 0.5 + 0.5, rel_tol=1e-12)


def test_depth_loss_no_valid_pixels():
    gt = torch.zeros(2, 2)
    loss, ok = depth_loss(torch.ones(2, 2), gt, torch.ones(2, 2, dtype=torch.bool))
    assert not ok and loss.item() == 0.0


def test_matched_depth_loss_equals_per_query_mean():
    g = torch.Generator().manual_seed(0)
    gt = torch.rand(6, 6, generator=g, dtype=torch.float64) * 20 + 1
    gt[0, 0] = 0
    pred = torch.rand(3, 6, 6, generator=g, dtype=torch.float64) * 20 + 1
    valid = torch.rand(3, 6, 6, generator=g) < 0.5
    valid[2] = False
    got = matched_depth_loss(pred, gt, valid & (gt > 0))
    ref = torch.stack([depth_loss(pred[j], gt, valid[j])[0] for j in range(2)]).mean()
    assert torch.allclose(got, ref, atol=1e-12)


def test_softmax_focal_gamma_zero_is_cross_entropy():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(7, 5, generator=g, dtype=torch.float64)
    t = torch.randint(0, 5, (7,), generator=g)
    assert torch.allclose(softmax_focal(logits, t, 0.0), F.cross_entropy(logits, t, reduction="none"))
    assert torch.all(softmax_focal(logits, t, 2.0) <= softmax_focal(logits, t, 0.0))


def test_mask_cls_loss_perfect_prediction_is_tiny():
    gm = torch.zeros(2, 4, 4, dtype=torch.float64)
    gm[0, :2], gm[1, 2:] = 1, 1
    gc = torch.tensor([0, 2])
    ml = torch.zeros(3, 4, 4, dtype=torch.float64)
    ml[:2] = (gm * 2 - 1) * 40
    cl = torch.full((3, 4), -40.0, dtype=torch.float64)
    cl[0, 0] = cl[1, 2] = cl[2, 3] = 40.0
    terms = mask_cls_loss(ml, cl, gm, gc, np.array([0, 1]), LossWeights())
    for k, v in terms.items():
        assert v.item() <= 1e-6, k


def test_mask_cls_loss_scalar_oracle():
    rng = np.random.default_rng(2)
    w = LossWeights()
    ml = rng.normal(size=(3, 3, 3))
    cl = rng.normal(size=(3, 4))
    gm = (rng.random((2, 3, 3)) < 0.5).astype(float)
    gc = np.array([1, 2])
    a = np.array([2, 0])
    terms = mask_cls_loss(torch.from_numpy(ml), torch.from_numpy(cl), torch.from_numpy(gm), torch.from_numpy(gc), a, w)
    targets = [3, 3, 3]
    targets[2], targets[0] = 1, 2
    cls = 0.0
    for n in range(3):
        z = [math.exp(v) for v in cl[n]]
        p = z[targets[n]] / sum(z)
        cls += -((1 - p) ** w.focal_gamma) * math.log(p)
    assert math.isclose(terms["cls"].item(), cls / 2, rel_tol=1e-9)
    dice = focal = ce = 0.0
    for j, q in enumerate(a):
        lg, t = ml[q].ravel(), gm[j].ravel()
        ps = [oracles.sigmoid(v) for v in lg]
        dice += 1 - (2 * sum(p * y for p, y in zip(ps, t)) + w.dice_eps) / (sum(ps) + sum(t) + w.dice_eps)
        f = c = 0.0
        for p, y in zip(ps, t):
            bce = -(y * math.log(p) + (1 - y) * math.log(1 - p))
            pt = p if y else 1 - p
            at = w.focal_alpha if y else 1 - w.focal_alpha
            f += at * (1 - pt) ** w.focal_gamma * bce
            c += bce
        focal += f / len(lg)
        ce += c / len(lg)
    assert math.isclose(terms["dice"].item(), dice / 2, rel_tol=1e-9)
    assert math.isclose(terms["mask_focal"].item(), focal / 2, rel_tol=1e-9)
    assert math.isclose(terms["mask_ce"].item(), ce / 2, rel_tol=1e-9)


def test_total_loss_linearity_and_zero_weights():
    one = {"depth": torch.tensor(0.0), "mask": torch.tensor(0.5), "cls": torch.tensor(0.25)}
    two = {"depth": torch.tensor(0.2), "mask": torch.tensor(1.0), "cls": torch.tensor(0.0)}
    w = LossWeights(depth=5.0, mask=1.0, cls=2.0)
    total, br = total_loss([one, two], torch.tensor(2.0), w)
    assert math.isclose(br["stage0"], 1.0) and math.isclose(br["stage1"], 2.0)
    assert math.isclose(total.item(), 3.0 + 0.25 * 2.0, rel_tol=1e-6)
    zero = LossWeights(depth=0, mask=0, cls=0, track=0, stage=(0, 0))
    assert total_loss([one, two], torch.tensor(2.0), zero)[0].item() == 0.0
    with pytest.raises(ValueError):
        total_loss([], 0.0, w)


def test_default_track_weight():
    assert LossWeights().track == 0.25


def _frame():
    pan = np.zeros((2, 8, 8), dtype=np.int32)
    pan[0, :3] = 1
    pan[0, 4:7, 1:4], pan[1, 4:7, 1:4] = 2, 1
    pan[0, 4:8, 5:8], pan[1, 4:8, 5:8] = 3, 2
    depth = np.full((8, 8), 10.0, dtype=np.float32)
    depth[:3] = 80.0
    depth[0, 0] = 0.0
    return pan, depth


def test_gt_from_frame_segments():
    pan, depth = _frame()
    gt = gt_from_frame(pan, depth, {2, 3, 4})
    assert gt.num == 4
    assert sorted(gt.classes.tolist()) == [0, 1, 2, 3]
    assert torch.all(gt.masks.sum(0) == 1)
    things = gt.track_ids[gt.is_thing]
    assert sorted(things.tolist()) == [1, 2]
    assert torch.all(gt.track_ids[~gt.is_thing] == 0)


def test_stage_loss_nonnegative_and_finite():
    pan, depth = _frame()
    gt = gt_from_frame(pan, depth, {2, 3, 4})
    g = torch.Generator().manual_seed(0)
    ml = torch.randn(6, 4, 4, generator=g)
    cl = torch.randn(6, 6, generator=g)
    dm = torch.rand(6, 4, 4, generator=g) * 50 + 1
    terms, a = stage_loss(ml, cl, dm, gt, LossWeights())
    assert len(a) == gt.num and len(set(a.tolist())) == gt.num
    for k, v in terms.items():
        assert torch.isfinite(v) and v.item() >= 0, k


def test_gtset_num():
    gt = GtSet(torch.zeros(0, 2, 2), torch.zeros(0, dtype=torch.long), torch.ones(2, 2), torch.zeros(0, dtype=torch.bool), torch.zeros(0, dtype=torch.long))
    assert gt.num == 0
    terms, a = stage_loss(torch.zeros(3, 2, 2), torch.zeros(3, 4), torch.ones(3, 2, 2), gt, LossWeights())
    assert len(a) == 0 and terms["dice"].item() == 0.0


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(depth=-1.0).validate()
    with pytest.raises(ValueError):
        LossWeights(mask=float("nan")).validate()
