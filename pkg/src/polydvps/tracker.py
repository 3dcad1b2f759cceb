"""Appearance-embedding tracking: ROI-pooled embeddings, contrastive loss and online association."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from torchvision.ops import roi_align


@dataclass
class TrackEmbedding:
    vector: torch.Tensor  # E
    frame: int
    query: int
    score: float = 1.0
    cls: int = -1


class TrackHead(nn.Module):
    """7x7 region pooling from the panoptic feature, two convs and two FCs to an E-dim embedding."""

    def __init__(self, channels: int = 64, embed_dim: int = 32, pool: int = 7, hidden: int = 128):
        super().__init__()
        self.pool = pool
        self.convs = nn.Sequential(
            nn.Conv2d(channels, channels // 2, 3, padding=1),
            nn.GroupNorm(math.gcd(8, channels // 2), channels // 2),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Sequential(
            nn.Linear(channels // 2 * pool * pool, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, feat: torch.Tensor, boxes: torch.Tensor, spatial_scale: float) -> torch.Tensor:
        """``feat`` is B x C x H x W; ``boxes`` is K x 5 (batch index, x1, y1, x2, y2) in mask pixels."""
        if boxes.shape[0] == 0:
            return feat.new_zeros((0, self.fc[-1].out_features))
        rois = roi_align(feat, boxes.to(feat.dtype), self.pool, spatial_scale=spatial_scale, sampling_ratio=2, aligned=True)
        return self.fc(self.convs(rois).flatten(1))


def mask_box(mask: np.ndarray | torch.Tensor) -> tuple[float, float, float, float] | None:
    """Tight box ``(x1, y1, x2, y2)`` in pixel-edge coordinates, or None for an empty mask."""
    m = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    ys, xs = np.nonzero(m)
    if len(ys) == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def extract_embeddings(
    x_pan: torch.Tensor,
    masks,
    head: TrackHead,
    mask_stride: int,
    frame: int = 0,
    scores=None,
    classes=None,
) -> list[TrackEmbedding]:
    """Embeddings for every nonempty mask, in mask order. ``mask_stride`` is feature stride / mask resolution ratio."""
    feat = x_pan[None] if x_pan.dim() == 3 else x_pan
    boxes, keep = [], []
    for i, m in enumerate(masks):
        b = mask_box(m)
        if b is not None:
            boxes.append((0.0, *b))
            keep.append(i)
    if not keep:
        return []
    vecs = head(feat, torch.tensor(boxes, dtype=feat.dtype), 1.0 / mask_stride)
    return [
        TrackEmbedding(
            vector=vecs[j],
            frame=frame,
            query=i,
            score=float(scores[i]) if scores is not None else 1.0,
            cls=int(classes[i]) if classes is not None else -1,
        )
        for j, i in enumerate(keep)
    ]


def track_loss(v: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
    """``log(1 + sum_{k+} sum_{k-} exp(v.k- - v.k+))``; zero when either set is empty."""
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        return v.sum() * 0.0
    pos = positives @ v
    neg = negatives @ v
    z = (neg[None, :] - pos[:, None]).reshape(-1)
    return torch.logsumexp(torch.cat([z.new_zeros(1), z]), dim=0)


def bidirectional_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Average of the row-wise and column-wise softmax of the dot-product matrix ``a @ b.T``."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    s = a @ b.T
    return 0.5 * (s.softmax(dim=1) + s.softmax(dim=0))


@dataclass
class _Track:
    embedding: torch.Tensor
    smoothed: torch.Tensor
    last_seen: int
    cls: int


@dataclass
class TrackMemory:
    tracks: dict[int, _Track] = field(default_factory=dict)
    next_id: int = 1
    frame: int = -1


def associate(
    memory: TrackMemory,
    current: list[TrackEmbedding],
    threshold: float = 0.3,
    momentum: float = 0.8,
    max_age: int = 10,
    class_aware: bool = True,
) -> tuple[list[int], TrackMemory]:
    """Greedy assignment of current embeddings to stored tracks.

    Pairs are taken in descending bidirectional similarity; a pair below
    ``threshold`` (or crossing classes with ``class_aware``) is never taken and
    its embedding opens a fresh id. Matched tracks blend in the new embedding
    with weight ``momentum``. Tracks unseen for more than ``max_age`` frames
    are dropped. Ids are never reused.
    """
    frame = memory.frame + 1
    if current:
        frame = max(frame, max(e.frame for e in current))
    ids = list(memory.tracks)
    ids_out = [0] * len(current)
    if current and ids:
        mem = torch.stack([memory.tracks[i].smoothed for i in ids])
        cur = torch.stack([e.vector for e in current]).detach()
        f = bidirectional_similarity(cur, mem).cpu().numpy()
        if class_aware:
            cc = np.array([e.cls for e in current])[:, None]
            mc = np.array([memory.tracks[i].cls for i in ids])[None, :]
            f = np.where(cc == mc, f, -np.inf)
        order = sorted(
            ((f[r, c], r, c) for r in range(f.shape[0]) for c in range(f.shape[1])),
            key=lambda x: (-x[0], x[1], x[2]),
        )
        used_r, used_c = set(), set()
        for val, r, c in order:
            if val < threshold:
                break
            if r in used_r or c in used_c:
                continue
            used_r.add(r)
            used_c.add(c)
            ids_out[r] = ids[c]
    tracks = dict(memory.tracks)
    next_id = memory.next_id
    for r, e in enumerate(current):
        vec = e.vector.detach()
        if ids_out[r]:
            old = tracks[ids_out[r]]
            tracks[ids_out[r]] = _Track(vec, (1 - momentum) * old.smoothed + momentum * vec, frame, old.cls)
        else:
            ids_out[r] = next_id
            tracks[next_id] = _Track(vec, vec, frame, e.cls)
            next_id += 1
    tracks = {k: t for k, t in tracks.items() if frame - t.last_seen <= max_age}
    return ids_out, TrackMemory(tracks=tracks, next_id=next_id, frame=frame)
