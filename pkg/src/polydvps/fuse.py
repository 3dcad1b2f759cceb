"""Inference-time fusion of per-query masks and depths into panoptic and dense depth maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import datafmt
from .model import PolyphonicFormer
from .tracker import TrackMemory, associate, extract_embeddings


@dataclass(frozen=True)
class MergeThresholds:
    score: float = 0.3
    overlap_keep: float = 0.5
    min_area: int = 16
    mask: float = 0.5


@dataclass
class KeptSegment:
    query: int
    cls: int
    score: float
    local_id: int  # 0 for stuff
    is_thing: bool


@dataclass
class PanopticDepthResult:
    panoptic: np.ndarray  # 2 x H x W
    depth: np.ndarray  # H x W
    instance_index: dict[int, int] = field(default_factory=dict)  # track id -> query index
    scores: dict[int, float] = field(default_factory=dict)
    owner: np.ndarray | None = None  # H x W query index, N for the stage-0 fallback
    dense_depth: np.ndarray | None = None  # stage-0 depth at the same resolution


def merge_panoptic(
    mask_logits,
    class_logits,
    sem_logits,
    thing_classes,
    stuff_classes,
    thresholds: MergeThresholds = MergeThresholds(),
):
    """Paint kept query masks in descending class confidence.

    A query is kept when its best non-void class probability reaches
    ``thresholds.score``. A painted mask is dropped when its still-unpainted
    fraction is below ``overlap_keep`` or its unpainted area is below
    ``min_area``. Thing queries get consecutive instance ids from 1; stuff
    queries paint id 0. Pixels left unpainted take the best stuff class of the
    stage-0 semantic logits.

    Returns ``(panoptic 2 x H x W, kept segments, owner map)``; the owner map
    holds the painting query, or N where the fallback applied.
    """
    mask_logits = torch.as_tensor(mask_logits).detach().float()
    class_logits = torch.as_tensor(class_logits).detach().float()
    n, h, w = mask_logits.shape
    probs = class_logits.softmax(-1)[:, :-1]
    score, cls = probs.max(-1)
    score = score.numpy()
    cls = cls.numpy()
    binary = (mask_logits.sigmoid() > thresholds.mask).numpy()
    things = set(int(c) for c in thing_classes)

    order = sorted((q for q in range(n) if score[q] >= thresholds.score), key=lambda q: (-score[q], q))
    painted = np.zeros((h, w), dtype=bool)
    owner = np.full((h, w), n, dtype=np.int64)
    pan = np.zeros((2, h, w), dtype=np.int32)
    kept: list[KeptSegment] = []
    next_id = 1
    for q in order:
        area = int(binary[q].sum())
        if area == 0:
            continue
        free = binary[q] & ~painted
        free_area = int(free.sum())
        if free_area / area < thresholds.overlap_keep or free_area < thresholds.min_area:
            continue
        c = int(cls[q])
        is_thing = c in things
        lid = next_id if is_thing else 0
        if is_thing:
            next_id += 1
        pan[0][free] = c
        pan[1][free] = lid
        owner[free] = q
        painted |= free
        kept.append(KeptSegment(q, c, float(score[q]), lid, is_thing))

    if not painted.all():
        stuff = np.asarray(list(stuff_classes), dtype=np.int64)
        sem = torch.as_tensor(sem_logits).detach().float().numpy()
        fallback = stuff[np.argmax(sem[stuff], axis=0)]
        pan[0][~painted] = fallback[~painted]
        pan[1][~painted] = 0
    return pan, kept, owner


def merge_depth(depth_maps, instance_map) -> np.ndarray:
    """Dense depth by gathering each pixel from the query that owns it."""
    d = np.asarray(depth_maps.detach().cpu().numpy() if isinstance(depth_maps, torch.Tensor) else depth_maps)
    idx = np.asarray(instance_map)
    n = d.shape[0]
    if idx.shape != d.shape[1:]:
        raise ValueError("instance map and depth maps disagree on spatial size")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"instance index out of range [0, {n})")
    return np.take_along_axis(d, idx[None].astype(np.int64), axis=0)[0]


def _up(x: torch.Tensor, size, mode: str) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(x[None], size=size, mode=mode, **kw)[0]


@torch.no_grad()
def infer_frame(
    image: torch.Tensor,
    model: PolyphonicFormer,
    memory: TrackMemory | None = None,
    frame: int | None = None,
    thresholds: MergeThresholds = MergeThresholds(),
    track_threshold: float = 0.3,
    track_momentum: float = 0.8,
    track_max_age: int = 10,
) -> tuple[PanopticDepthResult, TrackMemory]:
    """Full single-frame inference with online tracking.

    Per-query mask logits (bilinear), depth maps (bilinear) and stage-0
    semantic logits are brought to input resolution before merging, so the
    fused depth at every pixel is exactly the owning query's upsampled map.
    Only the final stage is used.
    """
    model.eval()
    cfg = model.cfg
    memory = memory if memory is not None else TrackMemory()
    frame = memory.frame + 1 if frame is None else frame
    size = image.shape[-2:]
    feat, preds = model(image[None])
    last, first = preds[-1], preds[0]
    masks = _up(last.mask_logits[0], size, "bilinear")
    depth_q = _up(last.depth_maps[0], size, "bilinear")
    dense = _up(first.dense_depth[0][None], size, "bilinear")
    sem = _up(first.sem_logits[0], size, "bilinear")
    pan, kept, owner = merge_panoptic(masks, last.class_logits[0], sem, cfg.thing_classes, cfg.stuff_classes, thresholds)
    stack = torch.cat([depth_q, dense], dim=0)
    depth = merge_depth(stack, owner)

    thing_segs = [k for k in kept if k.is_thing]
    seg_masks = [owner == k.query for k in thing_segs]
    stride = feat.stride
    embs = extract_embeddings(
        feat.x_pan[0],
        seg_masks,
        model.track_head,
        mask_stride=stride,
        frame=frame,
        scores=[k.score for k in thing_segs],
        classes=[k.cls for k in thing_segs],
    )
    ids, memory = associate(memory, embs, track_threshold, track_momentum, track_max_age)
    local_to_track = {thing_segs[e.query].local_id: tid for e, tid in zip(embs, ids)}
    inst = pan[1].copy()
    out_inst = np.zeros_like(inst)
    index, scores = {}, {}
    for e, tid in zip(embs, ids):
        seg = thing_segs[e.query]
        out_inst[inst == seg.local_id] = tid
        index[tid] = seg.query
        scores[tid] = seg.score
    # thing segments whose embedding could not be computed keep no id
    pan = np.stack([pan[0], np.where(np.isin(inst, list(local_to_track)), out_inst, 0)])
    result = PanopticDepthResult(
        panoptic=pan.astype(np.int32),
        depth=depth.astype(np.float32),
        instance_index=index,
        scores=scores,
        owner=owner,
        dense_depth=dense[0].numpy().astype(np.float32),
    )
    return result, memory


@torch.no_grad()
def infer_sequence(images, model: PolyphonicFormer, **kw) -> list[PanopticDepthResult]:
    memory = TrackMemory()
    out = []
    for t in range(len(images)):
        img = torch.as_tensor(np.asarray(images[t]), dtype=torch.float32)
        res, memory = infer_frame(img, model, memory, frame=t, **kw)
        out.append(res)
    return out


def write_predictions(results: list[PanopticDepthResult], directory) -> None:
    """Write per-frame ``panoptic_<t>.pan`` and ``depth_<t>.dpt`` in the dataset format."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, r in enumerate(results):
        datafmt.write_panoptic(d / f"panoptic_{t}.pan", r.panoptic)
        datafmt.write_depth(d / f"depth_{t}.dpt", r.depth)
