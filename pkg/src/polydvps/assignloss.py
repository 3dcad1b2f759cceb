"""Bipartite ground-truth assignment and the per-stage / final training losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .polyhead import StagePrediction


@dataclass
class GtSet:
    """Ground truth segments for one frame, at the loss resolution."""

    masks: torch.Tensor  # M x H x W in {0, 1}
    classes: torch.Tensor  # M (long)
    depths: torch.Tensor  # H x W meters; 0 = invalid
    is_thing: torch.Tensor  # M (bool)
    track_ids: torch.Tensor  # M (long), 0 for stuff
    semantic: torch.Tensor | None = None  # H x W class map, 255 = void

    @property
    def num(self) -> int:
        return int(self.classes.shape[0])


@dataclass
class LossWeights:
    depth: float = 5.0
    mask: float = 1.0
    cls: float = 2.0
    track: float = 0.25
    stage: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    si: float = 0.5
    cost_cls: float = 2.0
    cost_dice: float = 4.0
    cost_bce: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1e-3

    def stage_weight(self, i: int) -> float:
        return self.stage[i] if i < len(self.stage) else 1.0

    def validate(self) -> None:
        vals = [self.depth, self.mask, self.cls, self.track, self.si, self.cost_cls, self.cost_dice, self.cost_bce, *self.stage]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


def hungarian_match(cost) -> np.ndarray:
    """Minimum-cost injective assignment of the M columns (ground truth) to the N rows (queries).

    Returns an array ``a`` of length M with ``a[m]`` the query matched to
    ground truth ``m``. Ties resolve toward the lowest query indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    n, m = cost.shape
    if m > n:
        raise ValueError(f"cannot assign {m} ground-truth segments to {n} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost.T)
    out = np.empty(m, dtype=np.int64)
    out[rows] = cols
    return out


def soft_dice(probs: torch.Tensor, targets: torch.Tensor, eps: float) -> torch.Tensor:
    """Pairwise soft dice between N flattened probability maps and M targets -> N x M."""
    inter = probs @ targets.T
    return (2 * inter + eps) / (probs.sum(-1)[:, None] + targets.sum(-1)[None, :] + eps)


def match_cost(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_classes: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """N x M matching cost from class probability, soft dice and mean pixel BCE. Depth is not used."""
    n = mask_logits.shape[0]
    m = gt_masks.shape[0]
    logits = mask_logits.reshape(n, -1)
    targets = gt_masks.reshape(m, -1).to(logits.dtype)
    prob_cls = class_logits.softmax(-1)[:, gt_classes]
    probs = logits.sigmoid()
    dice = soft_dice(probs, targets, w.dice_eps)
    p = logits.shape[1]
    # BCE(x, y) = softplus(x) - x*y, averaged over pixels, for every pair
    bce = (F.softplus(logits).sum(-1)[:, None] - logits @ targets.T) / p
    return w.cost_cls * (-prob_cls) + w.cost_dice * (1 - dice) + w.cost_bce * bce


def depth_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, si: float = 0.5) -> tuple[torch.Tensor, bool]:
    """Scale-invariant log loss + abs-rel + sq-rel over ``valid`` pixels.

    Returns ``(loss, ok)``; with no valid pixels the loss is 0 and ``ok`` is False.
    """
    valid = valid & (gt > 0)
    if not bool(valid.any()):
        return pred.sum() * 0.0, False
    p = pred[valid]
    g = gt[valid]
    d = torch.log(p) - torch.log(g)
    si_term = (d**2).mean() - si * d.mean() ** 2
    abs_rel = ((p - g).abs() / g).mean()
    sq_rel = ((p - g) ** 2 / g).mean()
    return si_term + abs_rel + sq_rel, True


def matched_depth_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor, si: float = 0.5) -> torch.Tensor:
    """Mean of :func:`depth_loss` over J query maps ``pred`` (J x H x W), each on its own ``valid`` region.

    Queries without valid pixels are left out of the mean.
    """
    v = valid.to(pred.dtype)
    cnt = v.flatten(1).sum(-1)
    ok = cnt > 0
    if not bool(ok.any()):
        return pred.sum() * 0.0
    g = torch.where(gt > 0, gt, torch.ones_like(gt)).expand_as(pred)
    d = (torch.log(pred) - torch.log(g)) * v
    c = cnt.clamp_min(1)
    mean_d = d.flatten(1).sum(-1) / c
    mean_d2 = (d**2).flatten(1).sum(-1) / c
    ar = ((pred - g).abs() / g * v).flatten(1).sum(-1) / c
    sr = ((pred - g) ** 2 / g * v).flatten(1).sum(-1) / c
    per = mean_d2 - si * mean_d**2 + ar + sr
    return per[ok].mean()


def sigmoid_focal(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def softmax_focal(logits: torch.Tensor, targets: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-sample ``-(1 - p_t)^gamma * log p_t``; reduces to cross-entropy at gamma = 0."""
    logp = logits.log_softmax(-1).gather(-1, targets[:, None])[:, 0]
    if gamma == 0:
        return -logp
    return -((1 - logp.exp()) ** gamma) * logp


def class_loss(class_logits: torch.Tensor, gt_classes: torch.Tensor, assignment: np.ndarray, w: LossWeights) -> torch.Tensor:
    """Softmax focal loss over all queries, unmatched ones targeting "no object"."""
    n, k1 = class_logits.shape
    target_cls = torch.full((n,), k1 - 1, dtype=torch.long, device=class_logits.device)
    if len(assignment):
        target_cls[torch.as_tensor(assignment, dtype=torch.long, device=class_logits.device)] = gt_classes.long()
    # normalized by the matched count, not N, so the many "no object" queries do not drown the positives
    return softmax_focal(class_logits, target_cls, w.focal_gamma).sum() / max(len(assignment), 1)


def matched_mask_loss(logits: torch.Tensor, gt_masks: torch.Tensor, w: LossWeights) -> dict[str, torch.Tensor]:
    """Dice, sigmoid focal and BCE between matched mask logits (J x ...) and their targets, averaged over J."""
    logits = logits.reshape(len(logits), -1)
    targets = gt_masks.reshape(len(logits), -1).to(logits.dtype)
    probs = logits.sigmoid()
    dice = 1 - (2 * (probs * targets).sum(-1) + w.dice_eps) / (probs.sum(-1) + targets.sum(-1) + w.dice_eps)
    focal = sigmoid_focal(logits, targets, w.focal_alpha, w.focal_gamma).mean(-1)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none").mean(-1)
    return {"dice": dice.mean(), "mask_focal": focal.mean(), "mask_ce": ce.mean()}


def mask_cls_loss(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_classes: torch.Tensor,
    assignment: np.ndarray,
    w: LossWeights,
) -> dict[str, torch.Tensor]:
    """Class focal loss summed over all queries (unmatched -> "no object") per matched query; dice, focal and BCE on matched masks."""
    cls = class_loss(class_logits, gt_classes, assignment, w)
    if len(assignment) == 0:
        zero = mask_logits.sum() * 0.0
        return {"cls": cls, "dice": zero, "mask_focal": zero, "mask_ce": zero}
    q = torch.as_tensor(assignment, dtype=torch.long, device=class_logits.device)
    return {"cls": cls, **matched_mask_loss(mask_logits[q], gt_masks, w)}


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x[None], size=size, mode="bilinear", align_corners=False)[0]


def stage_loss(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    depth_maps: torch.Tensor,
    gt: GtSet,
    w: LossWeights,
    dense_depth: torch.Tensor | None = None,
    sem_logits: torch.Tensor | None = None,
    depth_supervised: bool = True,
) -> tuple[dict[str, torch.Tensor], np.ndarray]:
    """Joint depth / mask / class loss for one stage of one frame.

    Predictions are bilinearly resized to the ground-truth resolution. With
    ``dense_depth`` the depth term supervises that single map over all valid
    pixels instead of per-query maps.
    """
    size = gt.depths.shape[-2:]
    with torch.no_grad():
        cost = match_cost(_resize(mask_logits, size), class_logits, gt.masks, gt.classes, w) if gt.num else None
    assignment = hungarian_match(cost.cpu().numpy()) if cost is not None else np.zeros(0, dtype=np.int64)
    # resizing is per-channel linear, so picking the matched queries first and
    # resizing only those gives the same loss at a fraction of the cost
    q = torch.as_tensor(assignment, dtype=torch.long, device=class_logits.device)
    terms = {"cls": class_loss(class_logits, gt.classes, assignment, w)}
    if len(assignment):
        terms.update(matched_mask_loss(_resize(mask_logits[q], size), gt.masks, w))
    else:
        zero = mask_logits.sum() * 0.0
        terms.update({"dice": zero, "mask_focal": zero, "mask_ce": zero})
    mask_term = terms["dice"] + terms["mask_focal"] + terms["mask_ce"]
    if sem_logits is not None and gt.semantic is not None:
        sem = _resize(sem_logits, size)
        target = gt.semantic.long()
        if bool((target != 255).any()):
            terms["sem_ce"] = F.cross_entropy(sem[None], target[None], ignore_index=255)
            mask_term = mask_term + terms["sem_ce"]
    valid = gt.depths > 0
    zero = depth_maps.sum() * 0.0
    if not depth_supervised:
        depth_term = zero
    elif dense_depth is not None:
        depth_term, _ = depth_loss(_resize(dense_depth[None], size)[0], gt.depths, valid, w.si)
    elif len(assignment):
        dm = _resize(depth_maps[q], size)
        depth_term = matched_depth_loss(dm, gt.depths, valid[None] & (gt.masks > 0), w.si)
    else:
        depth_term = zero
    terms.update({"depth": depth_term, "mask": mask_term})
    return terms, assignment


def combine_stage(terms: dict[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    return w.depth * terms["depth"] + w.mask * terms["mask"] + w.cls * terms["cls"]


def total_loss(
    stage_terms: list[dict[str, torch.Tensor]],
    track_term: torch.Tensor | float,
    w: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum over stages of ``lambda_i * (lambda_depth L_depth + lambda_mask L_mask + lambda_cls L_cls)``
    plus ``lambda_track * L_track``."""
    if not stage_terms:
        raise ValueError("need at least one stage")
    total = 0.0
    breakdown: dict[str, float] = {}
    for i, terms in enumerate(stage_terms):
        li = combine_stage(terms, w)
        total = total + w.stage_weight(i) * li
        breakdown[f"stage{i}"] = float(li.detach())
        for k, v in terms.items():
            breakdown[f"stage{i}/{k}"] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    total = total + w.track * track_term
    breakdown["track"] = float(track_term.detach()) if isinstance(track_term, torch.Tensor) else float(track_term)
    breakdown["total"] = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return total, breakdown


def frame_stage_terms(preds: list[StagePrediction], b: int, gt: GtSet, w: LossWeights, instance_depth: bool = True):
    """Per-stage loss terms for batch element ``b``; each stage is matched independently.

    Returns the term dicts and the final stage's assignment.
    """
    out = []
    assignment = np.zeros(0, dtype=np.int64)
    for p in preds:
        first = p.stage == 0
        terms, assignment = stage_loss(
            p.mask_logits[b],
            p.class_logits[b],
            p.depth_maps[b],
            gt,
            w,
            dense_depth=p.dense_depth[b] if first else None,
            sem_logits=p.sem_logits[b] if first else None,
            depth_supervised=first or instance_depth,
        )
        out.append(terms)
    return out, assignment


def gt_from_frame(panoptic: np.ndarray, depth: np.ndarray, thing_classes, device=None, dtype=torch.float32) -> GtSet:
    """Segments of one ground-truth frame (``2 x H x W`` panoptic, ``H x W`` depth)."""
    cls, inst = panoptic[0], panoptic[1]
    keys = np.unique(cls.astype(np.int64) * 65536 + inst)
    masks, classes, things, tids = [], [], [], []
    for key in keys.tolist():
        c, i = divmod(key, 65536)
        if c == 255:
            continue
        masks.append((cls == c) & (inst == i))
        classes.append(c)
        things.append(c in thing_classes)
        tids.append(i)
    h, w = cls.shape
    m = torch.as_tensor(np.stack(masks) if masks else np.zeros((0, h, w), bool), dtype=dtype, device=device)
    return GtSet(
        masks=m,
        classes=torch.as_tensor(classes, dtype=torch.long, device=device),
        depths=torch.as_tensor(depth, dtype=dtype, device=device),
        is_thing=torch.as_tensor(things, dtype=torch.bool, device=device),
        track_ids=torch.as_tensor(tids, dtype=torch.long, device=device),
        semantic=torch.as_tensor(cls, dtype=torch.long, device=device),
    )
