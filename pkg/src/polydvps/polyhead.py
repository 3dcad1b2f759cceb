"""Polyphonic head: dense stage-0 initialization followed by S refinement stages.

Each stage groups the panoptic and depth features with the previous stage's
soft masks, updates both query sets with gated fusion (the depth update also
receives the freshly updated panoptic queries), and reasons over the queries
to produce masks, classes and per-query depth maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .featnet import FeaturePair


@dataclass
class HeadConfig:
    channels: int = 64
    num_queries: int = 16
    num_classes: int = 5
    stages: int = 3
    d_max: float = 88.0
    num_heads: int = 4
    ffn_ratio: int = 4
    query_linking: bool = True
    dense_init: bool = True
    instance_depth: bool = True
    seed: int = 0


@dataclass
class QueryState:
    q_pan: torch.Tensor  # [B,] N x C
    q_dep: torch.Tensor  # [B,] N x C
    masks_prev: torch.Tensor | None  # [B,] N x H_f x W_f in [0, 1]
    stage: int


@dataclass
class StagePrediction:
    mask_logits: torch.Tensor  # [B,] N x H_f x W_f
    class_logits: torch.Tensor  # [B,] N x (K + 1), "no object" last
    depth_maps: torch.Tensor  # [B,] N x H_f x W_f meters
    queries: QueryState
    stage: int
    sem_logits: torch.Tensor | None = None  # stage 0 only: [B,] K x H_f x W_f
    dense_depth: torch.Tensor | None = None  # stage 0 only: [B,] H_f x W_f


def mask_group(features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Instance features: ``out[n, c] = sum_{u,v} masks[n,u,v] * features[c,u,v]``.

    Works batched (leading batch dim on both). No area normalization.
    """
    if features.shape[-2:] != masks.shape[-2:]:
        raise ValueError(f"spatial mismatch: features {tuple(features.shape)} vs masks {tuple(masks.shape)}")
    return torch.einsum("...nhw,...chw->...nc", masks, features)


class GatedUpdate(nn.Module):
    """Gated fusion of grouped instance features with the previous queries.

    Two independent projections form the gate feature (elementwise product);
    two independent FC layers read the gates from it and two more transform
    the features and queries that the gates weight.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.phi_x = nn.Linear(channels, channels)
        self.phi_q = nn.Linear(channels, channels)
        self.psi_gate_q = nn.Linear(channels, channels)
        self.psi_gate_x = nn.Linear(channels, channels)
        self.psi_x = nn.Linear(channels, channels)
        self.psi_q = nn.Linear(channels, channels)

    def gates(self, x_inst: torch.Tensor, q_prev: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_g = self.phi_x(x_inst) * self.phi_q(q_prev)
        return torch.sigmoid(self.psi_gate_q(f_g)), torch.sigmoid(self.psi_gate_x(f_g))

    def forward(self, x_inst: torch.Tensor, q_prev: torch.Tensor) -> torch.Tensor:
        g_q, g_x = self.gates(x_inst, q_prev)
        return g_x * self.psi_x(x_inst) + g_q * self.psi_q(q_prev)


def gated_update(x_inst: torch.Tensor, q_prev: torch.Tensor, update: GatedUpdate) -> torch.Tensor:
    return update(x_inst, q_prev)


def linked_depth_update(
    x_dep: torch.Tensor,
    q_dep_prev: torch.Tensor,
    q_pan_new: torch.Tensor,
    update: GatedUpdate,
    linking: bool = True,
) -> torch.Tensor:
    """Depth-path query update; with ``linking`` the updated panoptic queries are added."""
    out = update(x_dep, q_dep_prev)
    if linking:
        out = out + q_pan_new
    return out


class QueryReasoning(nn.Module):
    """Pre-norm self-attention and FFN on the queries, then FC-LN-ReLU into per-pixel kernels.

    The FFN output is carried to the next stage; the FC-LN-ReLU output is the
    kernel contracted with the feature map (and, on the panoptic path, fed to
    the classifier).
    """

    def __init__(self, channels: int, num_heads: int = 4, ffn_ratio: int = 4, num_classes: int | None = None):
        super().__init__()
        self.attn_norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.ffn_norm = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_ratio * channels),
            nn.ReLU(inplace=True),
            nn.Linear(ffn_ratio * channels, channels),
        )
        self.fc = nn.Linear(channels, channels)
        self.fc_norm = nn.LayerNorm(channels)
        self.classifier = nn.Linear(channels, num_classes + 1) if num_classes is not None else None

    def set_identity_attention(self) -> None:
        """Zero the attention output and last FFN projections so both blocks pass queries through."""
        with torch.no_grad():
            self.attn.out_proj.weight.zero_()
            self.attn.out_proj.bias.zero_()
            self.ffn[2].weight.zero_()
            self.ffn[2].bias.zero_()

    def refine(self, queries: torch.Tensor) -> torch.Tensor:
        squeeze = queries.dim() == 2
        q = queries[None] if squeeze else queries
        h = self.attn_norm(q)
        q = q + self.attn(h, h, h, need_weights=False)[0]
        q = q + self.ffn(self.ffn_norm(q))
        return q[0] if squeeze else q

    def kernels(self, refined: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc_norm(self.fc(refined)))

    def forward(self, queries: torch.Tensor, feat: torch.Tensor):
        refined = self.refine(queries)
        kern = self.kernels(refined)
        maps = torch.einsum("...nc,...chw->...nhw", kern, feat)
        cls = self.classifier(kern) if self.classifier is not None else None
        return maps, refined, kern, cls


def query_reason(queries: torch.Tensor, feat: torch.Tensor, block: QueryReasoning, path: str, d_max: float = 88.0):
    """Per-query maps on one path.

    Returns ``(maps, next_queries, class_logits)``; on the depth path the maps
    are depths ``d_max * sigmoid(logit)`` and ``class_logits`` is None.
    """
    logits, refined, _, cls = block(queries, feat)
    if path == "pan":
        return logits, refined, cls
    if path == "dep":
        return d_max * torch.sigmoid(logits), refined, None
    raise ValueError(f"unknown path {path!r}")


class DenseInit(nn.Module):
    """Stage 0: dense instance, semantic and depth heads whose kernels seed the queries."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        C, N, K = cfg.channels, cfg.num_queries, cfg.num_classes
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        self.inst_kernels = nn.Parameter(torch.randn(N, C, generator=g) * C**-0.5)
        self.depth_kernel = nn.Parameter(torch.randn(C, generator=g) * 0.01)
        self.random_depth_queries = nn.Parameter(torch.randn(N, C, generator=g) * C**-0.5)
        self.sem_conv = nn.Conv2d(C, K, 1)
        self.cls_norm = nn.LayerNorm(C)
        self.classifier = nn.Linear(C, K + 1)

    def initial_depth_queries(self, batch_shape) -> torch.Tensor:
        N = self.cfg.num_queries
        if self.cfg.dense_init:
            q = self.depth_kernel.expand(N, -1)
        else:
            q = self.random_depth_queries
        return q.expand(*batch_shape, -1, -1)

    def forward(self, feat: FeaturePair) -> StagePrediction:
        x_pan, x_dep = feat.x_pan, feat.x_dep
        batch_shape = x_pan.shape[:-3]
        q_pan = self.inst_kernels.expand(*batch_shape, -1, -1)
        q_dep = self.initial_depth_queries(batch_shape)
        mask_logits = torch.einsum("...nc,...chw->...nhw", q_pan, x_pan)
        probs = torch.sigmoid(mask_logits)
        area = probs.sum(dim=(-2, -1)).clamp_min(1.0)[..., None]
        pooled = mask_group(x_pan, probs) / area
        class_logits = self.classifier(self.cls_norm(pooled))
        dense_logit = torch.einsum("c,...chw->...hw", self.depth_kernel, x_dep)
        dense_depth = self.cfg.d_max * torch.sigmoid(dense_logit)
        sem = x_pan if x_pan.dim() == 4 else x_pan[None]
        sem_logits = self.sem_conv(sem)
        if x_pan.dim() == 3:
            sem_logits = sem_logits[0]
        N = self.cfg.num_queries
        depth_maps = dense_depth.unsqueeze(-3).expand(*batch_shape, N, -1, -1)
        state = QueryState(q_pan=q_pan, q_dep=q_dep, masks_prev=None, stage=0)
        return StagePrediction(
            mask_logits=mask_logits,
            class_logits=class_logits,
            depth_maps=depth_maps,
            queries=state,
            stage=0,
            sem_logits=sem_logits,
            dense_depth=dense_depth,
        )


class RefineStage(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        C = cfg.channels
        self.cfg = cfg
        self.pan_in_norm = nn.LayerNorm(C)
        self.dep_in_norm = nn.LayerNorm(C)
        self.pan_update = GatedUpdate(C)
        self.dep_update = GatedUpdate(C)
        self.pan_reason = QueryReasoning(C, cfg.num_heads, cfg.ffn_ratio, num_classes=cfg.num_classes)
        self.dep_reason = QueryReasoning(C, cfg.num_heads, cfg.ffn_ratio)

    def forward(self, feat: FeaturePair, prev: StagePrediction, dense_depth: torch.Tensor) -> StagePrediction:
        cfg = self.cfg
        masks = torch.sigmoid(prev.mask_logits)
        q_prev = prev.queries
        x_p = self.pan_in_norm(mask_group(feat.x_pan, masks))
        q_pan = self.pan_update(x_p, q_prev.q_pan)
        mask_logits, q_pan_next, class_logits = query_reason(q_pan, feat.x_pan, self.pan_reason, "pan", cfg.d_max)
        if cfg.instance_depth:
            x_d = self.dep_in_norm(mask_group(feat.x_dep, masks))
            q_dep = linked_depth_update(x_d, q_prev.q_dep, q_pan, self.dep_update, cfg.query_linking)
            depth_maps, q_dep_next, _ = query_reason(q_dep, feat.x_dep, self.dep_reason, "dep", cfg.d_max)
        else:
            q_dep_next = q_prev.q_dep
            depth_maps = dense_depth.unsqueeze(-3).expand_as(mask_logits)
        state = QueryState(q_pan=q_pan_next, q_dep=q_dep_next, masks_prev=masks, stage=prev.stage + 1)
        return StagePrediction(mask_logits, class_logits, depth_maps, state, stage=prev.stage + 1)


class PolyphonicHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        if cfg.stages < 1:
            raise ValueError("need at least one refinement stage")
        self.cfg = cfg
        self.stage0 = DenseInit(cfg)
        self.stages = nn.ModuleList(RefineStage(cfg) for _ in range(cfg.stages))

    def forward(self, feat: FeaturePair) -> list[StagePrediction]:
        preds = [self.stage0(feat)]
        dense = preds[0].dense_depth
        for stage in self.stages:
            preds.append(stage(feat, preds[-1], dense))
        return preds


def stage0_init(feat: FeaturePair, head: PolyphonicHead) -> tuple[StagePrediction, QueryState]:
    pred = head.stage0(feat)
    return pred, pred.queries


def run_head(feat: FeaturePair, head: PolyphonicHead) -> list[StagePrediction]:
    """Stage 0 plus every refinement stage, in order."""
    return head(feat)
