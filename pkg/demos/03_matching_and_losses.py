"""Set prediction: match queries to ground-truth segments, then score them.

The matcher builds a (queries x segments) cost from class probability, dice
and per-pixel BCE, and solves the assignment exactly. Only matched queries
get mask and depth supervision; the rest are pushed toward "no object" by the
focal class loss.

    python demos/03_matching_and_losses.py
"""
import numpy as np
import torch

from polydvps import synthgen
from polydvps.assignloss import LossWeights, gt_from_frame, hungarian_match, match_cost, stage_loss
from polydvps.model import ModelConfig, PolyphonicFormer

clip = synthgen.generate_clip(synthgen.SceneSpec(seed=3))
cfg = ModelConfig(channels=32, num_queries=8, stages=2, num_heads=2)
model = PolyphonicFormer(cfg)
gt = gt_from_frame(clip.panoptic[0], clip.depth[0], set(cfg.thing_classes))
print(f"frame 0 has {len(gt.classes)} segments, classes {gt.classes.tolist()}")

with torch.no_grad():
    _, preds = model(torch.from_numpy(clip.images[:1]))
last = preds[-1]
up = torch.nn.functional.interpolate(last.mask_logits, size=clip.depth.shape[1:], mode="bilinear", align_corners=False)[0]
w = LossWeights()
cost = match_cost(up.flatten(1), last.class_logits[0], gt.masks.flatten(1).float(), gt.classes, w).numpy()
assign = hungarian_match(cost)
print("assignment (segment -> query):", assign.tolist())
print(f"matched cost {sum(cost[assign[j], j] for j in range(len(assign))):.3f}")

# brute force agrees on a small corner of the problem
sub = cost[:5, :3]
best = min(sum(sub[p[j], j] for j in range(3)) for p in __import__("itertools").permutations(range(5), 3))
a = hungarian_match(sub)
print(f"5x3 sub-problem: solver {sum(sub[a[j], j] for j in range(3)):.4f}, enumeration {best:.4f}")

terms, _ = stage_loss(up, last.class_logits[0], torch.nn.functional.interpolate(last.depth_maps, size=clip.depth.shape[1:], mode="bilinear", align_corners=False)[0], gt, w)
print("untrained stage loss:", {k: round(float(v), 3) for k, v in terms.items()})
