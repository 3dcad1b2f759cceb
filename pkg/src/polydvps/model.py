"""The full network: feature extractor, polyphonic head and tracking head."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn

from .featnet import FeatureExtractor, FeaturePair
from .polyhead import HeadConfig, PolyphonicHead, StagePrediction
from .tracker import TrackHead


@dataclass
class ModelConfig:
    channels: int = 64
    num_queries: int = 16
    embed_dim: int = 32
    stages: int = 3
    d_max: float = 88.0
    num_heads: int = 4
    thing_classes: tuple[int, ...] = (2, 3, 4)
    stuff_classes: tuple[int, ...] = (0, 1)
    query_linking: bool = True
    dense_init: bool = True
    instance_depth: bool = True
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.thing_classes) + len(self.stuff_classes)

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            channels=self.channels,
            num_queries=self.num_queries,
            num_classes=self.num_classes,
            stages=self.stages,
            d_max=self.d_max,
            num_heads=self.num_heads,
            query_linking=self.query_linking,
            dense_init=self.dense_init,
            instance_depth=self.instance_depth,
            seed=self.seed,
        )

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class PolyphonicFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if sorted(cfg.thing_classes + cfg.stuff_classes) != list(range(cfg.num_classes)):
            raise ValueError("class ids must be exactly 0..K-1 across thing and stuff sets")
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.features = FeatureExtractor(cfg.channels)
            self.head = PolyphonicHead(cfg.head_config())
            self.track_head = TrackHead(cfg.channels, cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> tuple[FeaturePair, list[StagePrediction]]:
        feat = self.features(images)
        return feat, self.head(feat)
