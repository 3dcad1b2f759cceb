"""Training loop, evaluation over clips, and the derived statistics used by the experiments."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics, synthgen
from .assignloss import GtSet, LossWeights, gt_from_frame, stage_loss, total_loss
from .checkpoint import save_model
from .config import ExperimentConfig
from .fuse import MergeThresholds, infer_sequence
from .model import PolyphonicFormer
from .polyhead import StagePrediction
from .tracker import TrackHead, mask_box, track_loss

log = logging.getLogger(__name__)

REFERENCE_OFFSETS = (-2, -1, 1, 2)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class History:
    steps: list[dict[str, float]] = field(default_factory=list)
    seconds: float = 0.0

    def write_tsv(self, path) -> None:
        if not self.steps:
            Path(path).write_text("")
            return
        keys = list(self.steps[0])
        lines = ["\t".join(keys)] + ["\t".join(f"{s.get(k, float('nan')):.6g}" for k in keys) for s in self.steps]
        Path(path).write_text("\n".join(lines) + "\n")


def batch_stage_terms(preds: list[StagePrediction], gts: list[GtSet], w: LossWeights, instance_depth: bool = True):
    """Stage-wise loss terms averaged over the batch; each stage and frame is matched independently."""
    out = []
    for p in preds:
        first = p.stage == 0
        ml, dm, dd, sl = p.mask_logits, p.depth_maps, p.dense_depth, p.sem_logits
        supervised = first or instance_depth
        acc: dict[str, torch.Tensor] = {}
        for b, gt in enumerate(gts):
            terms, _ = stage_loss(
                ml[b],
                p.class_logits[b],
                dm[b],
                gt,
                w,
                dense_depth=dd[b] if first else None,
                sem_logits=sl[b] if first else None,
                depth_supervised=supervised,
            )
            for k, v in terms.items():
                acc[k] = acc.get(k, 0.0) + v / len(gts)
        out.append(acc)
    return out


def gt_thing_boxes(panoptic: np.ndarray, thing_classes) -> tuple[list[tuple[float, ...]], list[int]]:
    boxes, tids = [], []
    cls, inst = panoptic[0], panoptic[1]
    for i in np.unique(inst):
        if i == 0:
            continue
        m = inst == i
        if int(cls[m][0]) not in thing_classes:
            continue
        boxes.append(mask_box(m))
        tids.append(int(i))
    return boxes, tids


def tracking_term(x_pan: torch.Tensor, key_pan, ref_pan, key_idx, ref_idx, head: TrackHead, stride: int, thing_classes):
    """Mean contrastive loss over key-frame instances that reappear in their reference frame."""
    boxes, owners = [], []
    per_pair = []
    for b, (kp, rp) in enumerate(zip(key_pan, ref_pan)):
        kb, kt = gt_thing_boxes(kp, thing_classes)
        rb, rt = gt_thing_boxes(rp, thing_classes)
        start = len(boxes)
        boxes += [(float(key_idx[b]), *x) for x in kb]
        mid = len(boxes)
        boxes += [(float(ref_idx[b]), *x) for x in rb]
        per_pair.append((start, mid, len(boxes), kt, rt))
    zero = x_pan.sum() * 0.0
    if not boxes:
        return zero
    emb = head(x_pan, torch.tensor(boxes, dtype=x_pan.dtype), 1.0 / stride)
    losses = []
    for start, mid, end, kt, rt in per_pair:
        ref = emb[mid:end]
        rt_arr = np.asarray(rt)
        for j, tid in enumerate(kt):
            pos = rt_arr == tid
            if pos.any() and (~pos).any():
                losses.append(track_loss(emb[start + j], ref[torch.as_tensor(pos)], ref[torch.as_tensor(~pos)]))
    return torch.stack(losses).mean() if losses else zero


def prepare_data(cfg: ExperimentConfig) -> Path:
    root = Path(cfg.data_root)
    if not (root / "manifest.json").exists():
        specs = synthgen.default_specs(cfg.n_clips, cfg.data_seed, cfg.scene_template())
        synthgen.write_dataset(specs, root, cfg.val_fraction)
    return root


def train(
    cfg: ExperimentConfig,
    clips: list[synthgen.ClipSample],
    run_dir=None,
    val_clips: list[synthgen.ClipSample] | None = None,
    progress=None,
) -> tuple[PolyphonicFormer, History]:
    """Train from scratch on ``clips`` with per-stage supervision and tracking pairs.

    Fixed ``cfg.seed`` gives a reproducible loss trajectory on one device.
    """
    if cfg.train_clips:
        clips = clips[: cfg.train_clips]
    if not clips:
        raise ValueError("no training clips")
    mcfg = cfg.model_config()
    w = cfg.loss_weights()
    thing = set(mcfg.thing_classes)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = PolyphonicFormer(mcfg)
        rng = np.random.default_rng(cfg.seed)
        steps_per_epoch = math.ceil(len(clips) / cfg.batch_size)
        total_steps = max(1, steps_per_epoch * cfg.epochs)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps)))
        images = [torch.from_numpy(c.images) for c in clips]
        gts_cache: dict[tuple[int, int], GtSet] = {}

        def gt_for(ci: int, t: int) -> GtSet:
            key = (ci, t)
            if key not in gts_cache:
                gts_cache[key] = gt_from_frame(clips[ci].panoptic[t], clips[ci].depth[t], thing)
            return gts_cache[key]

        hist = History()
        t0 = time.time()
        step = 0
        run_dir = Path(run_dir) if run_dir else None
        if run_dir:
            run_dir.mkdir(parents=True, exist_ok=True)
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(clips))
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                keys, refs = [], []
                for ci in idx:
                    T = clips[ci].num_frames
                    t = int(rng.integers(T))
                    cands = [t + o for o in REFERENCE_OFFSETS if 0 <= t + o < T] or [t]
                    keys.append(t)
                    refs.append(int(cands[rng.integers(len(cands))]))
                batch = torch.stack([images[ci][t] for ci, t in zip(idx, keys)] + [images[ci][t] for ci, t in zip(idx, refs)])
                gts = [gt_for(ci, t) for ci, t in zip(idx, keys)] + [gt_for(ci, t) for ci, t in zip(idx, refs)]
                feat, preds = model(batch)
                terms = batch_stage_terms(preds, gts, w, mcfg.instance_depth)
                nb = len(idx)
                trk = tracking_term(
                    feat.x_pan,
                    [clips[ci].panoptic[t] for ci, t in zip(idx, keys)],
                    [clips[ci].panoptic[t] for ci, t in zip(idx, refs)],
                    list(range(nb)),
                    list(range(nb, 2 * nb)),
                    model.track_head,
                    feat.stride,
                    thing,
                )
                loss, breakdown = total_loss(terms, trk, w)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                sched.step()
                rec = {"epoch": epoch, "step": step, "lr": sched.get_last_lr()[0]}
                rec.update({k: v for k, v in breakdown.items() if "/" not in k})
                hist.steps.append(rec)
                step += 1
            if progress:
                progress(epoch, hist.steps[-1])
            log.info("epoch %d loss %.4f", epoch, hist.steps[-1]["total"])
            if run_dir:
                save_model(run_dir / "checkpoint.pdck", model, {"epoch": epoch, "config_hash": cfg.hash()})
        hist.seconds = time.time() - t0
    if run_dir:
        hist.write_tsv(run_dir / "loss_curve.tsv")
        (run_dir / "config.txt").write_text(cfg.to_text())
    return model, hist


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    report: metrics.MetricReport
    predictions: list[metrics.Sequence]
    dense_depths: list[np.ndarray]  # per clip, T x H x W stage-0 depth


def thresholds_for(cfg: ExperimentConfig) -> MergeThresholds:
    return MergeThresholds(score=cfg.score_threshold, overlap_keep=cfg.overlap_keep, min_area=cfg.min_area)


def predict_clips(model: PolyphonicFormer, clips, cfg: ExperimentConfig):
    preds, dense = [], []
    for c in clips:
        res = infer_sequence(
            c.images,
            model,
            thresholds=thresholds_for(cfg),
            track_threshold=cfg.track_threshold,
            track_momentum=cfg.track_momentum,
        )
        preds.append(metrics.Sequence(np.stack([r.panoptic for r in res]), np.stack([r.depth for r in res])))
        dense.append(np.stack([r.dense_depth for r in res]))
    return preds, dense


def evaluate_model(model: PolyphonicFormer, clips, cfg: ExperimentConfig) -> Evaluation:
    preds, dense = predict_clips(model, clips, cfg)
    gts = [metrics.Sequence(c.panoptic, c.depth) for c in clips]
    mc = cfg.model_config()
    report = metrics.evaluate(
        preds, gts, mc.num_classes, mc.thing_classes, cfg.eval_ks, cfg.eval_lambdas, config_hash=cfg.hash()
    )
    report.extras.update(derived_statistics(preds, dense, clips, mc.thing_classes))
    return Evaluation(report, preds, dense)


def derived_statistics(preds, dense, clips, thing_classes) -> dict[str, float]:
    """Dense-baseline comparisons and tracking counts that accompany the metric report."""
    gd = [c.depth[t] for c in clips for t in range(c.num_frames)]
    dd = [d[t] for d in dense for t in range(d.shape[0])]
    qd = [p.depth[t] for p in preds for t in range(len(p))]
    aware_d = total_d = 0
    for c, d in zip(clips, dense):
        for t in range(c.num_frames):
            a, n = metrics.depth_aware_instances(d[t], c.depth[t], c.panoptic[t], thing_classes)
            aware_d += a
            total_d += n
    sharp_q = metrics.boundary_sharpness(qd, gd, [c.panoptic[t] for c in clips for t in range(c.num_frames)])
    sharp_d = metrics.boundary_sharpness(dd, gd, [c.panoptic[t] for c in clips for t in range(c.num_frames)])
    sep = [i for i, c in enumerate(clips) if synthgen.is_well_separated(c)]
    switches = sum(metrics.id_switches(preds[i], metrics.Sequence(clips[i].panoptic, clips[i].depth), thing_classes) for i in sep)
    return {
        "abs_rel_dense": metrics.abs_rel(dd, gd),
        "depth_aware_dense": float(aware_d),
        "depth_aware_dense_total": float(total_d),
        "boundary_sharpness_query": sharp_q,
        "boundary_sharpness_dense": sharp_d,
        "separated_clips": float(len(sep)),
        "id_switches_separated": float(switches),
    }
