"""Panoptic, depth and tracking metrics: PQ, DVPQ, STQ components, DQ, DSTQ.

Panoptic maps are ``2 x H x W`` integer arrays (class, instance id); class 255
is void. Depth maps are meters with 0 marking invalid ground truth. Every
accumulator is a sum of sufficient statistics, so sequences and windows can
be evaluated independently and merged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VOID = 255
_SHIFT = 1 << 16

DEPTH_AWARE_PIXEL_THRESHOLD = 0.25
DEPTH_AWARE_FRACTION = 0.10
DQ_THRESHOLD = 0.1


@dataclass
class Sequence:
    """One video: panoptic ``T x 2 x H x W`` and depth ``T x H x W``."""

    panoptic: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return self.panoptic.shape[0]


# --------------------------------------------------------------------- PQ


@dataclass
class PQStat:
    """Per-class sums: class -> [iou_sum, tp, fp, fn]."""

    per_class: dict[int, np.ndarray] = field(default_factory=dict)

    def _row(self, c: int) -> np.ndarray:
        if c not in self.per_class:
            self.per_class[c] = np.zeros(4)
        return self.per_class[c]

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for c, row in other.per_class.items():
            self._row(c)[:] += row
        return self

    def __add__(self, other: "PQStat") -> "PQStat":
        out = PQStat({c: r.copy() for c, r in self.per_class.items()})
        out += other
        return out

    def class_pq(self) -> dict[int, float]:
        out = {}
        for c, (iou, tp, fp, fn) in sorted(self.per_class.items()):
            denom = tp + 0.5 * fp + 0.5 * fn
            if denom > 0:
                out[c] = iou / denom
        return out

    def pq(self, classes=None) -> float:
        vals = [v for c, v in self.class_pq().items() if classes is None or c in classes]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self, thing_classes) -> tuple[float, float, float]:
        things = set(thing_classes)
        stuff = {c for c in self.per_class if c not in things}
        return self.pq(), self.pq(things), self.pq(stuff)


def _segment_keys(pan: np.ndarray) -> np.ndarray:
    cls = pan[0].astype(np.int64)
    inst = pan[1].astype(np.int64)
    return cls * _SHIFT + inst


def panoptic_quality(pred: np.ndarray, gt: np.ndarray, void: int = VOID) -> PQStat:
    """Sufficient statistics for PQ on one panoptic pane.

    Segments are (class, instance) pairs. A prediction matches a ground-truth
    segment of the same class when IoU > 0.5, where the union omits predicted
    pixels that fall on void ground truth. Unmatched predictions lying mostly
    on void ground truth are not counted as false positives.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pk = _segment_keys(pred).ravel()
    gk = _segment_keys(gt).ravel()
    p_valid = pred[0].ravel() != void
    g_valid = gt[0].ravel() != void
    g_void = ~g_valid

    p_ids, p_area = np.unique(pk[p_valid], return_counts=True)
    g_ids, g_area = np.unique(gk[g_valid], return_counts=True)
    p_area_d = dict(zip(p_ids.tolist(), p_area.tolist()))
    g_area_d = dict(zip(g_ids.tolist(), g_area.tolist()))

    both = p_valid & g_valid
    pair = gk[both] * (_SHIFT * _SHIFT) + pk[both]
    pair_ids, inter = np.unique(pair, return_counts=True)
    on_void_ids, on_void = np.unique(pk[p_valid & g_void], return_counts=True)
    on_void_d = dict(zip(on_void_ids.tolist(), on_void.tolist()))

    stat = PQStat()
    matched_p, matched_g = set(), set()
    for key, n in zip(pair_ids.tolist(), inter.tolist()):
        g, p = divmod(key, _SHIFT * _SHIFT)
        if g // _SHIFT != p // _SHIFT:
            continue
        union = p_area_d[p] + g_area_d[g] - n - on_void_d.get(p, 0)
        iou = n / union
        if iou > 0.5:
            row = stat._row(g // _SHIFT)
            row[0] += iou
            row[1] += 1
            matched_p.add(p)
            matched_g.add(g)
    for g in g_area_d:
        if g not in matched_g:
            stat._row(g // _SHIFT)[3] += 1
    for p, area in p_area_d.items():
        if p in matched_p:
            continue
        if on_void_d.get(p, 0) / area > 0.5:
            continue
        stat._row(p // _SHIFT)[2] += 1
    return stat


def pq_value(pred, gt, void: int = VOID) -> float:
    return panoptic_quality(pred, gt, void).pq()


# ------------------------------------------------------------------- DVPQ


def void_by_depth(pred_pan: np.ndarray, pred_depth: np.ndarray, gt_depth: np.ndarray, lam: float) -> np.ndarray:
    """Set predicted class to void where the relative depth error exceeds ``lam``.

    Only pixels with valid (> 0) ground-truth depth can be voided.
    """
    out = np.array(pred_pan, copy=True)
    if math.isinf(lam):
        return out
    valid = gt_depth > 0
    err = np.zeros_like(gt_depth, dtype=np.float64)
    err[valid] = np.abs(pred_depth[valid] - gt_depth[valid]) / gt_depth[valid]
    bad = valid & (err > lam)
    out[0][bad] = VOID
    return out


def window_panes(pred: Sequence, gt: Sequence, k: int, lam: float):
    """Yield (pred_pane, gt_pane) per window: k frames concatenated along the width."""
    T = len(gt)
    if len(pred) != T:
        raise ValueError("prediction and ground truth sequences differ in length")
    if k > T:
        raise ValueError(f"window k={k} exceeds sequence length {T}")
    masked = [void_by_depth(pred.panoptic[t], pred.depth[t], gt.depth[t], lam) for t in range(T)]
    for t in range(T - k + 1):
        p = np.concatenate(masked[t : t + k], axis=-1)
        g = np.concatenate([gt.panoptic[i] for i in range(t, t + k)], axis=-1)
        yield p, g


def dvpq_stat(preds: list[Sequence], gts: list[Sequence], k: int, lam: float) -> PQStat:
    stat = PQStat()
    for pred, gt in zip(preds, gts, strict=True):
        for p, g in window_panes(pred, gt, k, lam):
            stat += panoptic_quality(p, g)
    return stat


def dvpq(preds: list[Sequence], gts: list[Sequence], k: int, lam: float, thing_classes) -> tuple[float, float, float]:
    """(DVPQ, DVPQ-Thing, DVPQ-Stuff) for window size ``k`` and depth threshold ``lam``.

    ``lam = inf`` disables depth masking.
    """
    return dvpq_stat(preds, gts, k, lam).summary(thing_classes)


# -------------------------------------------------------------------- STQ


@dataclass
class STQStat:
    num_classes: int
    thing_classes: tuple[int, ...]
    inter: np.ndarray = None
    union: np.ndarray = None
    aq_sum: float = 0.0
    n_tracks: int = 0

    def __post_init__(self):
        if self.inter is None:
            self.inter = np.zeros(self.num_classes)
            self.union = np.zeros(self.num_classes)

    def __iadd__(self, other: "STQStat") -> "STQStat":
        self.inter += other.inter
        self.union += other.union
        self.aq_sum += other.aq_sum
        self.n_tracks += other.n_tracks
        return self

    @property
    def sq(self) -> float:
        present = self.union > 0
        if not present.any():
            return float("nan")
        return float(np.mean(self.inter[present] / self.union[present]))

    @property
    def aq(self) -> float:
        if self.n_tracks == 0:
            return float("nan")
        return self.aq_sum / self.n_tracks


def _thing_ids(pan: np.ndarray, thing_mask_lut: np.ndarray) -> np.ndarray:
    cls = pan[:, 0].astype(np.int64)
    inst = pan[:, 1].astype(np.int64)
    is_thing = thing_mask_lut[np.clip(cls, 0, len(thing_mask_lut) - 1)] & (cls != VOID) & (inst > 0)
    return np.where(is_thing, cls * _SHIFT + inst, 0)


def stq_stat(pred: Sequence, gt: Sequence, num_classes: int, thing_classes) -> STQStat:
    """Segmentation (class IoU) and association statistics for one sequence.

    Association follows STEP: each ground-truth track is scored by
    ``sum_p TPA(p,g) * IoU_id(p,g) / |g|`` over the predicted tracks that
    overlap it; predicted pixels on void ground truth are ignored.
    """
    thing_classes = tuple(thing_classes)
    st = STQStat(num_classes, thing_classes)
    gcls = gt.panoptic[:, 0].ravel()
    pcls = pred.panoptic[:, 0].ravel()
    valid = gcls != VOID
    pc = np.where(pcls == VOID, num_classes, pcls)[valid]
    gc = gcls[valid]
    conf = np.bincount(gc * (num_classes + 1) + pc, minlength=num_classes * (num_classes + 1))
    conf = conf.reshape(num_classes, num_classes + 1)
    inter = np.diag(conf[:, :num_classes])
    gt_area = conf.sum(axis=1)
    pred_area = conf[:, :num_classes].sum(axis=0)
    st.inter = inter.astype(np.float64)
    st.union = (gt_area + pred_area - inter).astype(np.float64)

    lut = np.zeros(max(num_classes, max(thing_classes, default=0) + 1), dtype=bool)
    lut[list(thing_classes)] = True
    g_ids = _thing_ids(gt.panoptic, lut).ravel()
    p_ids = _thing_ids(pred.panoptic, lut).ravel()
    p_ids = np.where(valid, p_ids, 0)

    gu, g_area = np.unique(g_ids[g_ids > 0], return_counts=True)
    pu, p_area = np.unique(p_ids[p_ids > 0], return_counts=True)
    p_area_d = dict(zip(pu.tolist(), p_area.tolist()))
    both = (g_ids > 0) & (p_ids > 0)
    pair_ids, tpa = np.unique(g_ids[both] * (_SHIFT * _SHIFT) + p_ids[both], return_counts=True)
    per_g: dict[int, float] = {g: 0.0 for g in gu.tolist()}
    g_area_d = dict(zip(gu.tolist(), g_area.tolist()))
    for key, n in zip(pair_ids.tolist(), tpa.tolist()):
        g, p = divmod(key, _SHIFT * _SHIFT)
        iou = n / (g_area_d[g] + p_area_d[p] - n)
        per_g[g] += n * iou
    st.aq_sum = float(sum(v / g_area_d[g] for g, v in per_g.items()))
    st.n_tracks = len(per_g)
    return st


def stq_components(preds: list[Sequence], gts: list[Sequence], num_classes: int, thing_classes) -> tuple[float, float]:
    """(AQ, SQ) accumulated over sequences."""
    total = STQStat(num_classes, tuple(thing_classes))
    for p, g in zip(preds, gts, strict=True):
        total += stq_stat(p, g, num_classes, thing_classes)
    return total.aq, total.sq


# ------------------------------------------------------------------ depth


def depth_inliers(pred_depth: np.ndarray, gt_depth: np.ndarray, threshold: float = DQ_THRESHOLD) -> tuple[int, int]:
    valid = gt_depth > 0
    err = np.abs(pred_depth[valid] - gt_depth[valid]) / gt_depth[valid]
    return int(np.count_nonzero(err <= threshold)), int(valid.sum())


def depth_quality(pred_depths, gt_depths, threshold: float = DQ_THRESHOLD) -> float:
    """Fraction of valid pixels whose absolute relative error is at most ``threshold``."""
    good = total = 0
    for p, g in zip(pred_depths, gt_depths, strict=True):
        a, b = depth_inliers(np.asarray(p), np.asarray(g), threshold)
        good += a
        total += b
    if total == 0:
        raise ValueError("no valid depth pixels")
    return good / total


def dstq(aq: float, sq: float, dq: float) -> float:
    return (aq * sq * dq) ** (1.0 / 3.0)


def dq_and_dstq(pred_depths, gt_depths, aq: float, sq: float, threshold: float = DQ_THRESHOLD) -> tuple[float, float]:
    dq = depth_quality(pred_depths, gt_depths, threshold)
    return dq, dstq(aq, sq, dq)


def abs_rel_sums(pred_depth: np.ndarray, gt_depth: np.ndarray) -> tuple[float, int]:
    valid = gt_depth > 0
    return float(np.sum(np.abs(pred_depth[valid] - gt_depth[valid]) / gt_depth[valid])), int(valid.sum())


def abs_rel(pred_depths, gt_depths) -> float:
    s = n = 0
    for p, g in zip(pred_depths, gt_depths, strict=True):
        a, b = abs_rel_sums(np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64))
        s += a
        n += b
    return s / n if n else float("nan")


def depth_aware_instances(
    pred_depth: np.ndarray,
    gt_depth: np.ndarray,
    gt_panoptic: np.ndarray,
    thing_classes,
    pixel_threshold: float = DEPTH_AWARE_PIXEL_THRESHOLD,
    fraction: float = DEPTH_AWARE_FRACTION,
) -> tuple[int, int]:
    """Count (depth-aware, total) thing instances in one frame.

    An instance is depth-aware when fewer than ``fraction`` of its valid
    pixels have relative error above ``pixel_threshold``.
    """
    cls, inst = gt_panoptic[0], gt_panoptic[1]
    valid = gt_depth > 0
    err = np.zeros(gt_depth.shape)
    err[valid] = np.abs(pred_depth[valid] - gt_depth[valid]) / gt_depth[valid]
    aware = total = 0
    keys = np.unique(cls.astype(np.int64) * _SHIFT + inst)
    for key in keys.tolist():
        c, i = divmod(key, _SHIFT)
        if i == 0 or c not in thing_classes:
            continue
        m = (cls == c) & (inst == i) & valid
        n = int(m.sum())
        if n == 0:
            continue
        total += 1
        if np.count_nonzero(err[m] > pixel_threshold) < fraction * n:
            aware += 1
    return aware, total


# ----------------------------------------------------------------- report


@dataclass
class MetricReport:
    dvpq: dict[tuple[int, float], tuple[float, float, float]]
    pq: float
    pq_thing: float
    pq_stuff: float
    pq_per_class: dict[int, float]
    aq: float
    sq: float
    dq: float
    dstq: float
    abs_rel: float
    depth_aware: tuple[int, int]
    extras: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (k, lam), (v, th, st) in sorted(self.dvpq.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            tag = f"k={k}/lambda={_fmt_lam(lam)}"
            out[f"dvpq/{tag}"] = v
            out[f"dvpq_thing/{tag}"] = th
            out[f"dvpq_stuff/{tag}"] = st
        out.update(
            {
                "pq": self.pq,
                "pq_thing": self.pq_thing,
                "pq_stuff": self.pq_stuff,
                "aq": self.aq,
                "sq": self.sq,
                f"dq@{DQ_THRESHOLD}": self.dq,
                "dstq": self.dstq,
                "abs_rel": self.abs_rel,
                "depth_aware": self.depth_aware[0],
                "depth_aware_total": self.depth_aware[1],
            }
        )
        for c, v in self.pq_per_class.items():
            out[f"pq_class/{c}"] = v
        out.update(self.extras)
        return out

    def to_kv(self) -> str:
        lines = [f"config_hash = {self.config_hash}"] if self.config_hash else []
        lines += [f"{k} = {_fmt_val(v)}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        ks = sorted({k for k, _ in self.dvpq})
        lams = sorted({lam for _, lam in self.dvpq}, reverse=True)
        head = ["DVPQ | Thing | Stuff"] + [f"k = {k}" for k in ks] + ["Average"]
        rows = []
        for lam in lams:
            cells = [self.dvpq[(k, lam)] for k in ks if (k, lam) in self.dvpq]
            avg = tuple(float(np.nanmean([c[i] for c in cells])) for i in range(3))
            rows.append([f"lambda = {_fmt_lam(lam)}"] + [_cell(self.dvpq.get((k, lam))) for k in ks] + [_cell(avg)])
        if len(lams) > 1:
            avg_row = ["Average"]
            for k in ks + [None]:
                sel = [v for (kk, _), v in self.dvpq.items() if k is None or kk == k]
                avg_row.append(_cell(tuple(float(np.nanmean([c[i] for c in sel])) for i in range(3))))
            rows.append(avg_row)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: " | ".join(s.ljust(w) for s, w in zip(r, widths))  # noqa: E731
        lines = [fmt(head), "-" * len(fmt(head))] + [fmt(r) for r in rows]
        lines.append("")
        lines.append(
            f"PQ {100 * self.pq:.1f} (thing {100 * self.pq_thing:.1f}, stuff {100 * self.pq_stuff:.1f})  "
            f"abs rel {self.abs_rel:.4f}"
        )
        lines.append(
            f"AQ {100 * self.aq:.1f}  SQ {100 * self.sq:.1f}  DQ@{DQ_THRESHOLD} {100 * self.dq:.1f}  "
            f"DSTQ {100 * self.dstq:.1f}"
        )
        a, t = self.depth_aware
        lines.append(f"depth-aware instances {a}/{t}" + (f" ({100 * a / t:.1f}%)" if t else ""))
        for k, v in self.extras.items():
            lines.append(f"{k} {_fmt_val(v)}")
        if self.config_hash:
            lines.append(f"config {self.config_hash}")
        return "\n".join(lines) + "\n"


def _fmt_lam(lam: float) -> str:
    return "inf" if math.isinf(lam) else f"{lam:g}"


def _fmt_val(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _cell(c) -> str:
    if c is None:
        return "-"
    return " | ".join("nan" if math.isnan(x) else f"{100 * x:.1f}" for x in c)


def evaluate(
    preds: list[Sequence],
    gts: list[Sequence],
    num_classes: int,
    thing_classes,
    ks=(1, 2, 3, 4),
    lams=(0.5, 0.25, 0.1),
    config_hash: str = "",
) -> MetricReport:
    """Compute the full report over aligned prediction / ground-truth sequences."""
    thing_classes = tuple(thing_classes)
    T = min(len(g) for g in gts) if gts else 0
    grid = {}
    for lam in lams:
        for k in ks:
            if k <= T:
                grid[(k, lam)] = dvpq(preds, gts, k, lam, thing_classes)
    frame_stat = dvpq_stat(preds, gts, 1, math.inf)
    pq, pq_th, pq_st = frame_stat.summary(thing_classes)
    aq, sq = stq_components(preds, gts, num_classes, thing_classes)
    pdep = [p.depth[t] for p in preds for t in range(len(p))]
    gdep = [g.depth[t] for g in gts for t in range(len(g))]
    dq, dstq_v = dq_and_dstq(pdep, gdep, aq, sq)
    aware = total = 0
    for p, g in zip(preds, gts):
        for t in range(len(g)):
            a, n = depth_aware_instances(p.depth[t], g.depth[t], g.panoptic[t], thing_classes)
            aware += a
            total += n
    return MetricReport(
        dvpq=grid,
        pq=pq,
        pq_thing=pq_th,
        pq_stuff=pq_st,
        pq_per_class=frame_stat.class_pq(),
        aq=aq,
        sq=sq,
        dq=dq,
        dstq=dstq_v,
        abs_rel=abs_rel(pdep, gdep),
        depth_aware=(aware, total),
        config_hash=config_hash,
    )


def boundary_pairs(gt_panoptic: np.ndarray, gt_depth: np.ndarray, thing_classes) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of 4-neighbour pixel pairs straddling a thing-instance boundary with valid depth."""
    cls, inst = gt_panoptic[0].astype(np.int64), gt_panoptic[1].astype(np.int64)
    key = cls * _SHIFT + inst
    thing = np.isin(cls, list(thing_classes)) & (inst > 0)
    valid = (gt_depth > 0) & (cls != VOID)
    h, w = key.shape
    idx = np.arange(h * w).reshape(h, w)
    a_list, b_list = [], []
    for a, b in ((idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])):
        ka, kb = key.ravel()[a], key.ravel()[b]
        sel = (ka != kb) & (thing.ravel()[a] | thing.ravel()[b]) & valid.ravel()[a] & valid.ravel()[b]
        a_list.append(a[sel])
        b_list.append(b[sel])
    return np.concatenate(a_list), np.concatenate(b_list)


def boundary_sharpness(pred_depths, gt_depths, gt_panoptics, thing_classes=(2, 3, 4)) -> float:
    """Mean |depth step| of a prediction across ground-truth instance boundaries.

    Sharper (less blurred) depth at object edges gives larger values.
    """
    total = 0.0
    n = 0
    for p, g, pan in zip(pred_depths, gt_depths, gt_panoptics):
        a, b = boundary_pairs(pan, g, thing_classes)
        pf = np.asarray(p, dtype=np.float64).ravel()
        total += float(np.abs(pf[a] - pf[b]).sum())
        n += len(a)
    return total / n if n else float("nan")


def id_switches(pred: Sequence, gt: Sequence, thing_classes) -> int:
    """Identity switches: changes of the IoU > 0.5 matched predicted id along each ground-truth track."""
    things = set(thing_classes)
    last: dict[int, int] = {}
    switches = 0
    for t in range(len(gt)):
        gk = _segment_keys(gt.panoptic[t])
        pk = _segment_keys(pred.panoptic[t])
        gvalid = gt.panoptic[t][0] != VOID
        pvalid = pred.panoptic[t][0] != VOID
        g_ids = [k for k in np.unique(gk[gvalid]).tolist() if k % _SHIFT and k // _SHIFT in things]
        p_ids = np.unique(pk[pvalid]).tolist()
        p_ids = [k for k in p_ids if k % _SHIFT and k // _SHIFT in things]
        for g in g_ids:
            gm = gk == g
            for p in p_ids:
                pm = (pk == p) & pvalid
                inter = np.count_nonzero(gm & pm)
                if inter == 0:
                    continue
                if inter / np.count_nonzero(gm | pm) > 0.5:
                    if g in last and last[g] != p:
                        switches += 1
                    last[g] = p
                    break
    return switches
