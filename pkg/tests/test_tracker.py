import math

import numpy as np
import pytest
import torch

from polydvps.tracker import (
    TrackEmbedding,
    TrackHead,
    TrackMemory,
    associate,
    bidirectional_similarity,
    extract_embeddings,
    mask_box,
    track_loss,
)

from . import oracles


def test_track_loss_examples():
    v = torch.tensor([1.0, 0.0], dtype=torch.float64)
    k = torch.tensor([[0.5, 3.0]], dtype=torch.float64)
    assert math.isclose(track_loss(v, k, k.clone()).item(), math.log(2), rel_tol=1e-12)
    pos = torch.tensor([[20.0, 0.0]], dtype=torch.float64)
    neg = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert track_loss(v, pos, neg).item() == pytest.approx(2.06e-9, rel=1e-2)


def test_track_loss_empty_side_is_zero():
    v = torch.ones(3)
    assert track_loss(v, torch.zeros(0, 3), torch.ones(2, 3)).item() == 0.0
    assert track_loss(v, torch.ones(2, 3), torch.zeros(0, 3)).item() == 0.0


def test_track_loss_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, pos, neg = rng.normal(size=4), rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        got = track_loss(*(torch.from_numpy(a) for a in (v, pos, neg))).item()
        assert math.isclose(got, oracles.track_loss(v, pos, neg), rel_tol=1e-9, abs_tol=1e-12)


def test_track_loss_monotone():
    g = torch.Generator().manual_seed(0)
    v = torch.randn(4, generator=g, dtype=torch.float64)
    pos, neg = torch.randn(2, 4, generator=g, dtype=torch.float64), torch.randn(3, 4, generator=g, dtype=torch.float64)
    base = track_loss(v, pos, neg)
    assert track_loss(v, pos + 0.1 * v, neg) < base
    assert track_loss(v, pos, neg + 0.1 * v) > base


def test_bidirectional_similarity():
    one = bidirectional_similarity(torch.randn(1, 4), torch.randn(1, 4))
    assert one.item() == 1.0
    a = torch.tensor([[30.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert bidirectional_similarity(a, b)[0, 0].item() == pytest.approx(1.0, abs=1e-9)
    assert bidirectional_similarity(torch.zeros(0, 4), torch.ones(2, 4)).shape == (0, 2)


def test_bidirectional_similarity_oracle_and_mass():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m, n = rng.integers(1, 5, size=2)
        a, b = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        got = bidirectional_similarity(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        np.testing.assert_allclose(got, oracles.bidirectional_similarity(a, b), atol=1e-9)
        assert math.isclose(got.sum(), (m + n) / 2, rel_tol=1e-12)
        perm = rng.permutation(n)
        permuted = bidirectional_similarity(torch.from_numpy(a), torch.from_numpy(b[perm])).numpy()
        np.testing.assert_allclose(permuted, got[:, perm], atol=1e-12)


def test_mask_box():
    m = np.zeros((6, 6), bool)
    assert mask_box(m) is None
    m[1:3, 2:5] = True
    assert mask_box(m) == (2.0, 1.0, 5.0, 3.0)
    assert mask_box(np.ones((4, 5), bool)) == (0.0, 0.0, 5.0, 4.0)


def test_extract_embeddings_skips_empty_and_keeps_order():
    torch.manual_seed(0)
    head = TrackHead(16, embed_dim=8).eval()
    feat = torch.randn(16, 8, 8)
    masks = [np.zeros((32, 32), bool) for _ in range(3)]
    masks[0][:8, :8] = True
    masks[2][20:, 20:] = True
    embs = extract_embeddings(feat, masks, head, mask_stride=4, frame=3, scores=[0.9, 0.5, 0.7], classes=[2, 3, 4])
    assert [e.query for e in embs] == [0, 2]
    assert [e.cls for e in embs] == [2, 4]
    assert all(e.vector.shape == (8,) and e.frame == 3 for e in embs)
    assert extract_embeddings(feat, [np.zeros((32, 32), bool)], head, 4) == []


def test_embedding_shift_invariance():
    torch.manual_seed(1)
    head = TrackHead(8, embed_dim=8).eval()
    feat = torch.zeros(8, 16, 16)
    feat[:, 2:8, 3:9] = torch.randn(8, 6, 6)
    shifted = torch.roll(feat, shifts=(4, 4), dims=(1, 2))
    m = np.zeros((16, 16), bool)
    m[2:8, 3:9] = True
    ms = np.roll(m, (4, 4), axis=(0, 1))
    a = extract_embeddings(feat, [m], head, 1)[0].vector
    b = extract_embeddings(shifted, [ms], head, 1)[0].vector
    assert torch.allclose(a, b, atol=1e-5)


def _emb(vec, frame, cls=2):
    return TrackEmbedding(torch.as_tensor(vec, dtype=torch.float32), frame, 0, 1.0, cls)


def test_associate_fresh_ids_and_persistence():
    eye = torch.eye(3) * 5
    mem = TrackMemory()
    ids, mem = associate(mem, [_emb(eye[i], 0) for i in range(3)])
    assert ids == [1, 2, 3]
    for t in range(1, 6):
        ids, mem = associate(mem, [_emb(eye[i], t) for i in (2, 0, 1)])
        assert ids == [3, 1, 2]
    assert mem.next_id == 4


def test_associate_threshold_and_class_gate():
    mem = TrackMemory()
    _, mem = associate(mem, [_emb([5.0, 0.0], 0, cls=2)])
    ids, mem2 = associate(mem, [_emb([5.0, 0.0], 1, cls=3)])
    assert ids == [2]
    ids, _ = associate(mem, [_emb([5.0, 0.0], 1, cls=3)], class_aware=False)
    assert ids == [1]
    ids, _ = associate(mem, [_emb([5.0, 0.0], 1)], threshold=1.01)
    assert ids == [2]


def test_associate_momentum_and_eviction():
    mem = TrackMemory()
    _, mem = associate(mem, [_emb([1.0, 0.0], 0)])
    _, mem = associate(mem, [_emb([0.0, 1.0], 1)], momentum=0.8)
    assert torch.allclose(mem.tracks[1].smoothed, torch.tensor([0.2, 0.8]))
    for t in range(2, 13):
        _, mem = associate(mem, [], max_age=10)
    assert 1 not in mem.tracks
    ids, mem = associate(mem, [_emb([0.0, 1.0], 13)])
    assert ids == [2]
