"""Shared convolutional backbone with parallel semantic-FPN necks for panoptic and depth features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONE_STRIDE = 16
FEATURE_STRIDE = 4


@dataclass
class FeaturePair:
    x_pan: torch.Tensor  # [B,] C x H_f x W_f
    x_dep: torch.Tensor
    stride: int = FEATURE_STRIDE


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class SemanticFPNNeck(nn.Module):
    """Fuses the stride 4/8/16 stages at stride 4 with 1x1 convs and nearest upsampling."""

    def __init__(self, in_widths: tuple[int, ...], channels: int):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(w, channels, 1) for w in in_widths)
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        size = feats[0].shape[-2:]
        fused = self.laterals[0](feats[0])
        for lat, f in zip(self.laterals[1:], feats[1:]):
            fused = fused + F.interpolate(lat(f), size=size, mode="nearest")
        return self.out(F.relu(self.norm(fused)))


class FeatureExtractor(nn.Module):
    """Four stride-2 stages; necks read stages 2-4 and emit stride-4 features.

    Two normalized coordinate planes are appended to the RGB input so the
    network can read image position (the ground-contact row is a depth cue).
    """

    def __init__(self, channels: int = 64, widths: tuple[int, ...] = (16, 32, 64, 64), coord_channels: bool = True):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("backbone has exactly four stages")
        self.channels = channels
        self.coord_channels = coord_channels
        cin = 3 + (2 if coord_channels else 0)
        stages = []
        for w in widths:
            stages.append(_conv_block(cin, w, 2))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.pan_neck = SemanticFPNNeck(tuple(widths[1:]), channels)
        self.dep_neck = SemanticFPNNeck(tuple(widths[1:]), channels)

    def forward(self, image: torch.Tensor) -> FeaturePair:
        squeeze = image.dim() == 3
        x = image[None] if squeeze else image
        h, w = x.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValueError(f"input {h}x{w} is not divisible by the backbone stride {BACKBONE_STRIDE}")
        if self.coord_channels:
            ys = torch.linspace(-1, 1, h, dtype=x.dtype, device=x.device)
            xs = torch.linspace(-1, 1, w, dtype=x.dtype, device=x.device)
            grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"))
            x = torch.cat([x, grid.expand(x.shape[0], -1, -1, -1)], dim=1)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        ms = feats[1:]
        x_pan = self.pan_neck(ms)
        x_dep = self.dep_neck(ms)
        if squeeze:
            x_pan, x_dep = x_pan[0], x_dep[0]
        return FeaturePair(x_pan, x_dep, FEATURE_STRIDE)


def extract_features(image: torch.Tensor, net: FeatureExtractor) -> FeaturePair:
    return net(image)
