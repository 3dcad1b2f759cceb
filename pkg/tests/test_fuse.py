import numpy as np
import pytest
import torch

from polydvps.fuse import MergeThresholds, infer_frame, infer_sequence, merge_depth, merge_panoptic, write_predictions
from polydvps.model import ModelConfig, PolyphonicFormer
from polydvps import datafmt

from . import oracles

THING, STUFF = (2, 3, 4), (0, 1)


def _logits_for(masks):
    return torch.as_tensor(np.where(masks, 10.0, -10.0))


def _class_logits(classes, conf=5.0, k=5):
    cl = torch.zeros(len(classes), k + 1)
    for q, c in enumerate(classes):
        cl[q, c] = conf
    return cl


def test_merge_depth_examples():
    d = torch.stack([torch.full((2, 2), 1.0), torch.full((2, 2), 2.0)])
    np.testing.assert_array_equal(merge_depth(d, np.zeros((2, 2), int)), np.ones((2, 2)))
    out = merge_depth(d, np.array([[0, 0], [1, 1]]))
    np.testing.assert_array_equal(out, [[1, 1], [2, 2]])
    with pytest.raises(IndexError):
        merge_depth(d, np.array([[0, 2], [1, 1]]))
    with pytest.raises(ValueError):
        merge_depth(d, np.zeros((3, 2), int))


def test_merge_depth_oracle_and_gather_locality():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.random((4, 5, 5)) * 80 + 1
        owner = rng.integers(0, 4, size=(5, 5))
        out = merge_depth(d, owner)
        np.testing.assert_array_equal(out, oracles.merge_depth(d, owner))
        n, u, v = rng.integers(0, 4), rng.integers(0, 5), rng.integers(0, 5)
        if owner[u, v] != n:
            d2 = d.copy()
            d2[n, u, v] += 7.0
            assert merge_depth(d2, owner)[u, v] == out[u, v]


def test_merge_panoptic_disjoint_and_duplicate():
    m = np.zeros((3, 16, 16), bool)
    m[0, :8, :8] = True
    m[1, 8:, 8:] = True
    m[2] = m[0]
    sem = torch.zeros(5, 16, 16)
    cl = _class_logits([2, 3, 2])
    cl[2, 2] = 2.0  # duplicate, lower confidence
    pan, kept, owner = merge_panoptic(_logits_for(m), cl, sem, THING, STUFF, MergeThresholds(min_area=4))
    assert [k.query for k in kept] == [0, 1]
    assert set(np.unique(pan[1])) == {0, 1, 2}
    assert (owner[m[0]] == 0).all() and (owner[m[1]] == 1).all()
    assert (owner[~(m[0] | m[1])] == 3).all()
    assert (pan[0][~(m[0] | m[1])] == 0).all()


def test_merge_panoptic_painter_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        N, H, W = 3, 10, 10
        m = np.zeros((N, H, W), bool)
        for q in range(N):
            y, x = rng.integers(0, 6, size=2)
            h, w = rng.integers(3, 6, size=2)
            m[q, y : y + h, x : x + w] = True
        classes = rng.choice([0, 1, 2, 3, 4], size=N).tolist()
        cl = torch.as_tensor(rng.normal(size=(N, 6)), dtype=torch.float32)
        for q, c in enumerate(classes):
            cl[q, c] += 3.0
        sem = torch.as_tensor(rng.normal(size=(5, H, W)), dtype=torch.float32)
        th = MergeThresholds(score=0.3, overlap_keep=0.5, min_area=4)
        pan, _, owner = merge_panoptic(_logits_for(m), cl, sem, THING, STUFF, th)
        probs = cl.softmax(-1)[:, :-1]
        scores, best = probs.max(-1)
        sem_np = sem.numpy()
        stuff_arg = np.where(sem_np[1] > sem_np[0], 1, 0)
        c_o, i_o, own_o = oracles.painter(m, scores.tolist(), best.tolist(), set(THING), stuff_arg, 0.3, 0.5, 4)
        np.testing.assert_array_equal(pan[0], c_o)
        np.testing.assert_array_equal(pan[1], i_o)
        np.testing.assert_array_equal(owner, own_o)


def test_merge_panoptic_is_partition_and_filters_low_scores():
    m = np.ones((2, 8, 8), bool)
    cl = torch.zeros(2, 6)
    cl[:, 5] = 10.0  # everything "no object"
    sem = torch.zeros(5, 8, 8)
    sem[1] = 1.0
    pan, kept, owner = merge_panoptic(_logits_for(m), cl, sem, THING, STUFF)
    assert kept == []
    assert (pan[0] == 1).all() and (pan[1] == 0).all() and (owner == 2).all()


def _tiny_model(seed=0):
    return PolyphonicFormer(ModelConfig(channels=16, num_queries=4, embed_dim=8, stages=1, num_heads=2, seed=seed)).eval()


def test_infer_frame_depth_is_owners_upsampled_map_and_deterministic():
    model = _tiny_model()
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
    res, mem = infer_frame(img, model, thresholds=MergeThresholds(score=0.0, min_area=1))
    again, _ = infer_frame(img, model, thresholds=MergeThresholds(score=0.0, min_area=1))
    np.testing.assert_array_equal(res.panoptic, again.panoptic)
    np.testing.assert_array_equal(res.depth, again.depth)
    assert res.panoptic.shape == (2, 32, 32) and res.depth.shape == (32, 32)
    assert (res.depth > 0).all()
    with torch.no_grad():
        _, preds = model(img[None])
    qd = torch.nn.functional.interpolate(preds[-1].depth_maps, size=(32, 32), mode="bilinear", align_corners=False)[0]
    for u in range(32):
        for v in range(32):
            o = res.owner[u, v]
            expect = res.dense_depth[u, v] if o == qd.shape[0] else qd[o, u, v].item()
            assert res.depth[u, v] == pytest.approx(expect, rel=1e-6)
    ids = set(np.unique(res.panoptic[1])) - {0}
    assert ids <= set(res.instance_index)


def test_infer_sequence_and_write(tmp_path):
    model = _tiny_model(1)
    images = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
    res = infer_sequence(images, model)
    assert len(res) == 3
    write_predictions(res, tmp_path)
    for t in range(3):
        np.testing.assert_array_equal(datafmt.read_panoptic(tmp_path / f"panoptic_{t}.pan", 32, 32), res[t].panoptic)
        back = datafmt.read_depth(tmp_path / f"depth_{t}.dpt", 32, 32)
        assert np.abs(back - res[t].depth).max() <= 1 / 256
