"""One refinement stage, piece by piece.

A stage pools features through the previous stage's soft masks (mask
grouping), mixes the pooled vector into each query through learned gates,
then lets the queries attend to each other before predicting new masks,
classes and per-query depth maps. The depth query update also receives the
freshly updated panoptic query (query linking), which is how semantic
context reaches the depth path.

    python demos/02_unified_queries.py
"""
import torch

from polydvps.featnet import FeatureExtractor
from polydvps.polyhead import GatedUpdate, HeadConfig, PolyphonicHead, gated_update, linked_depth_update, mask_group

torch.manual_seed(0)
C, N, H, W = 16, 4, 8, 8

# mask grouping is a mask-weighted sum over pixels
feat = torch.randn(C, H, W)
masks = torch.zeros(N, H, W)
masks[0, :4, :4] = 1.0
masks[1, 4:, 4:] = 1.0
pooled = mask_group(feat, masks)
print("pooled shape", tuple(pooled.shape))
print("query 0 pools the top-left block:", torch.allclose(pooled[0], feat[:, :4, :4].sum((1, 2))))
print("empty masks pool to zero:", bool((pooled[2:] == 0).all()))

# gated update: both gates lie strictly in (0, 1)
upd = GatedUpdate(C)
q = torch.randn(N, C)
g_q, g_x = upd.gates(pooled, q)
print(f"gate ranges: query gate [{g_q.min():.3f}, {g_q.max():.3f}], feature gate [{g_x.min():.3f}, {g_x.max():.3f}]")
q_pan = gated_update(pooled, q, upd)

# query linking adds the updated panoptic query to the depth update
q_dep = torch.randn(N, C)
linked = linked_depth_update(pooled, q_dep, q_pan, GatedUpdate(C))
unlinked = linked_depth_update(pooled, q_dep, q_pan, GatedUpdate(C), linking=False)
print("linking changes the depth query:", not torch.allclose(linked, unlinked))

# the whole head: stage 0 (dense heads whose kernels seed the queries) plus S refinement stages
head = PolyphonicHead(HeadConfig(channels=C, num_queries=N, num_classes=5, stages=3, num_heads=2))
fx = FeatureExtractor(C)
with torch.no_grad():
    preds = head(fx(torch.rand(1, 3, 32, 32)))
for s, p in enumerate(preds):
    print(
        f"stage {s}: masks {tuple(p.mask_logits.shape)}, classes {tuple(p.class_logits.shape)}, "
        f"depth {tuple(p.depth_maps.shape)} in [{p.depth_maps.min():.1f}, {p.depth_maps.max():.1f}] m"
    )
