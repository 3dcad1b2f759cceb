import numpy as np
import pytest
import torch

from polydvps.featnet import FeatureExtractor, FeaturePair
from polydvps.polyhead import (
    GatedUpdate,
    HeadConfig,
    PolyphonicHead,
    QueryReasoning,
    gated_update,
    linked_depth_update,
    mask_group,
    query_reason,
    run_head,
)

from . import oracles


def _params(update: GatedUpdate):
    return {
        name: (getattr(update, name).weight.detach().numpy(), getattr(update, name).bias.detach().numpy())
        for name in ("phi_x", "phi_q", "psi_gate_q", "psi_gate_x", "psi_x", "psi_q")
    }


def test_mask_group_annihilation_and_constant():
    f = torch.full((3, 4, 4), 2.0)
    assert torch.equal(mask_group(f, torch.zeros(2, 4, 4)), torch.zeros(2, 3))
    m = torch.zeros(1, 4, 4)
    m[0, :2, :2] = 1
    assert torch.allclose(mask_group(f, m), torch.full((1, 3), 8.0))


def test_mask_group_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = rng.normal(size=(3, 2, 2))
        m = rng.random((2, 2, 2))
        out = mask_group(torch.from_numpy(f), torch.from_numpy(m)).numpy()
        np.testing.assert_allclose(out, oracles.mask_group(f, m), atol=1e-9)


def test_mask_group_linear_in_masks():
    g = torch.Generator().manual_seed(1)
    f = torch.randn(4, 5, 5, generator=g, dtype=torch.float64)
    m1, m2 = torch.rand(3, 5, 5, generator=g, dtype=torch.float64), torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    lhs = mask_group(f, 0.3 * m1 - 2.0 * m2)
    rhs = 0.3 * mask_group(f, m1) - 2.0 * mask_group(f, m2)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_mask_group_shape_mismatch():
    with pytest.raises(ValueError):
        mask_group(torch.zeros(3, 4, 4), torch.zeros(2, 4, 5))


def test_gated_update_zero_weights():
    upd = GatedUpdate(3)
    for p in upd.parameters():
        torch.nn.init.zeros_(p)
    x, q = torch.randn(2, 3), torch.randn(2, 3)
    g_q, g_x = upd.gates(x, q)
    assert torch.all(g_q == 0.5) and torch.all(g_x == 0.5)
    assert torch.equal(gated_update(x, q, upd), torch.zeros(2, 3))


def test_gated_update_saturated_gates():
    torch.manual_seed(0)
    upd = GatedUpdate(3)
    with torch.no_grad():
        for lin in (upd.psi_gate_q, upd.psi_gate_x):
            lin.weight.zero_()
            lin.bias.fill_(20.0)
    x, q = torch.randn(2, 3), torch.randn(2, 3)
    expect = upd.psi_x(x) + upd.psi_q(q)
    assert torch.allclose(gated_update(x, q, upd), expect, atol=1e-6)


def test_gated_update_scalar_oracle():
    torch.manual_seed(3)
    for _ in range(10):
        upd = GatedUpdate(3).double()
        x, q = torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
        out = gated_update(x, q, upd).detach().numpy()
        np.testing.assert_allclose(out, oracles.gated_update(x.numpy(), q.numpy(), _params(upd)), atol=1e-6)


def test_gates_strictly_inside_unit_interval():
    torch.manual_seed(4)
    upd = GatedUpdate(8)
    g_q, g_x = upd.gates(torch.randn(5, 8), torch.randn(5, 8))
    for g in (g_q, g_x):
        assert torch.all(g > 0) and torch.all(g < 1)


def test_gate_layers_are_independent_parameters():
    upd = GatedUpdate(4)
    ptrs = [p.data_ptr() for p in upd.parameters()]
    assert len(ptrs) == len(set(ptrs)) == 12


def test_linked_update():
    torch.manual_seed(5)
    upd = GatedUpdate(3).double()
    x, q, qp = (torch.randn(2, 3, dtype=torch.float64) for _ in range(3))
    plain = gated_update(x, q, upd)
    assert torch.equal(linked_depth_update(x, q, torch.zeros_like(qp), upd), plain)
    assert torch.allclose(linked_depth_update(x, q, qp, upd), plain + qp)
    assert torch.equal(linked_depth_update(x, q, qp, upd, linking=False), plain)
    for p in upd.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(linked_depth_update(x, q, qp, upd), qp)


def test_query_reason_identity_mode_matches_contraction():
    torch.manual_seed(6)
    block = QueryReasoning(8, num_heads=2, num_classes=3).double()
    block.set_identity_attention()
    q = torch.randn(4, 8, dtype=torch.float64)
    feat = torch.randn(8, 3, 3, dtype=torch.float64)
    fc = (block.fc.weight.detach().numpy(), block.fc.bias.detach().numpy())
    ln = (block.fc_norm.weight.detach().numpy(), block.fc_norm.bias.detach().numpy())
    maps_o, depth_o = oracles.reason_identity(q.numpy(), feat.numpy(), fc, ln, 88.0)
    maps, nxt, cls = query_reason(q, feat, block, "pan")
    assert torch.allclose(nxt, q)
    assert cls.shape == (4, 4)
    np.testing.assert_allclose(maps.detach().numpy(), maps_o, atol=1e-9)
    depth, _, none = query_reason(q, feat, block, "dep", d_max=88.0)
    assert none is None
    np.testing.assert_allclose(depth.detach().numpy(), depth_o, atol=1e-9)


def test_query_reason_zero_kernel_gives_half_depth():
    block = QueryReasoning(8, num_heads=2)
    block.set_identity_attention()
    with torch.no_grad():
        block.fc_norm.weight.zero_()
        block.fc_norm.bias.zero_()
    depth, _, _ = query_reason(torch.randn(3, 8), torch.randn(8, 4, 4), block, "dep", d_max=88.0)
    assert torch.allclose(depth, torch.full_like(depth, 44.0))


def test_query_reason_rejects_unknown_path():
    block = QueryReasoning(8, num_heads=2)
    with pytest.raises(ValueError):
        query_reason(torch.randn(3, 8), torch.randn(8, 4, 4), block, "flow")


def test_query_reason_permutation_equivariant():
    torch.manual_seed(7)
    block = QueryReasoning(8, num_heads=2, num_classes=3).double().eval()
    q = torch.randn(5, 8, dtype=torch.float64)
    feat = torch.randn(8, 4, 4, dtype=torch.float64)
    perm = torch.randperm(5)
    maps, nxt, cls = query_reason(q, feat, block, "pan")
    maps_p, nxt_p, cls_p = query_reason(q[perm], feat, block, "pan")
    assert torch.allclose(maps[perm], maps_p, atol=1e-10)
    assert torch.allclose(cls[perm], cls_p, atol=1e-10)


def _feat(C=64, B=None, H=16, W=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    shape = (C, H, W) if B is None else (B, C, H, W)
    return FeaturePair(torch.randn(shape, generator=g), torch.randn(shape, generator=g), 4)


def test_head_shapes_and_stage_count():
    cfg = HeadConfig(channels=64, num_queries=16, num_classes=5, stages=3)
    # float64 so the sigmoid cannot round to exactly 0 or 1
    head = PolyphonicHead(cfg).double()
    f = _feat()
    preds = run_head(FeaturePair(f.x_pan.double(), f.x_dep.double(), 4), head)
    assert len(preds) == 4
    assert [p.stage for p in preds] == [0, 1, 2, 3]
    for p in preds:
        assert p.mask_logits.shape == (16, 16, 16)
        assert p.class_logits.shape == (16, 6)
        assert p.depth_maps.shape == (16, 16, 16)
        assert p.queries.q_pan.shape == (16, 64)
        assert torch.all(p.depth_maps > 0) and torch.all(p.depth_maps < cfg.d_max)
    assert preds[0].sem_logits.shape == (5, 16, 16)
    assert preds[0].dense_depth.shape == (16, 16)


def test_head_batched_matches_unbatched():
    head = PolyphonicHead(HeadConfig(stages=2)).eval()
    f = _feat(B=2)
    batched = run_head(f, head)
    single = run_head(FeaturePair(f.x_pan[1], f.x_dep[1], 4), head)
    assert torch.allclose(batched[-1].mask_logits[1], single[-1].mask_logits, atol=1e-4)
    assert torch.allclose(batched[-1].depth_maps[1], single[-1].depth_maps, atol=1e-3)


def test_dense_init_switch():
    on = PolyphonicHead(HeadConfig(dense_init=True))
    q0 = run_head(_feat(), on)[0].queries.q_dep
    assert torch.equal(q0, on.stage0.depth_kernel.expand(16, -1))
    off_a = PolyphonicHead(HeadConfig(dense_init=False, seed=1))
    off_b = PolyphonicHead(HeadConfig(dense_init=False, seed=2))
    qa = run_head(_feat(), off_a)[0].queries.q_dep
    qb = run_head(_feat(), off_b)[0].queries.q_dep
    assert not torch.allclose(qa, qb)


def test_panoptic_queries_start_from_instance_kernels():
    head = PolyphonicHead(HeadConfig())
    assert torch.equal(run_head(_feat(), head)[0].queries.q_pan, head.stage0.inst_kernels)


def test_hybrid_mode_depth_is_dense_head():
    head = PolyphonicHead(HeadConfig(instance_depth=False))
    preds = run_head(_feat(), head)
    dense = preds[0].dense_depth
    for p in preds[1:]:
        assert torch.equal(p.depth_maps, dense.expand_as(p.depth_maps))


def test_without_linking_depth_ignores_panoptic_update_params():
    torch.manual_seed(0)
    head = PolyphonicHead(HeadConfig(query_linking=False, stages=1)).eval()
    f = _feat()
    before = run_head(f, head)[1].depth_maps
    with torch.no_grad():
        for p in head.stages[0].pan_update.parameters():
            p.add_(torch.randn_like(p))
    after = run_head(f, head)
    assert torch.allclose(after[1].depth_maps, before)
    linked = PolyphonicHead(HeadConfig(query_linking=True, stages=1)).eval()
    b2 = run_head(f, linked)[1].depth_maps
    with torch.no_grad():
        for p in linked.stages[0].pan_update.parameters():
            p.add_(torch.randn_like(p))
    assert not torch.allclose(run_head(f, linked)[1].depth_maps, b2)


def test_feature_extractor_shapes():
    net = FeatureExtractor(channels=32)
    fp = net(torch.rand(2, 3, 64, 64))
    assert fp.x_pan.shape == (2, 32, 16, 16) and fp.x_dep.shape == (2, 32, 16, 16)
    assert fp.stride == 4
    with pytest.raises(ValueError):
        net(torch.rand(3, 60, 64))
    pan_params = {id(p) for p in net.pan_neck.parameters()}
    assert not pan_params & {id(p) for p in net.dep_neck.parameters()}
