"""Flat key/value experiment configuration."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .assignloss import LossWeights
from .model import ModelConfig
from .synthgen import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    channels: int = 64
    num_queries: int = 16
    embed_dim: int = 32
    stages: int = 3
    d_max: float = 88.0
    num_heads: int = 4
    # ablation switches
    query_linking: bool = True
    dense_init: bool = True
    instance_depth: bool = True
    # loss weights
    lambda_depth: float = 5.0
    lambda_mask: float = 1.0
    lambda_cls: float = 2.0
    lambda_track: float = 0.25
    lambda_stage: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    lambda_si: float = 0.5
    # data
    data_root: str = "data/synth"
    n_clips: int = 250
    val_fraction: float = 0.2
    data_seed: int = 0
    frames: int = 6
    height: int = 64
    width: int = 64
    n_things_min: int = 1
    n_things_max: int = 5
    d_min: float = 2.0
    d_far: float = 80.0
    # optimization
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0
    train_clips: int = 0  # 0 = use the whole train split
    # tracking / merging
    track_threshold: float = 0.3
    track_momentum: float = 0.8
    score_threshold: float = 0.3
    overlap_keep: float = 0.5
    min_area: int = 16
    # evaluation
    eval_ks: tuple[int, ...] = (1, 2, 3, 4)
    eval_lambdas: tuple[float, ...] = (0.5, 0.25, 0.1)
    run_dir: str = "runs/default"

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.channels % self.num_heads:
            raise ConfigError("channels must be divisible by num_heads")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")
        try:
            self.loss_weights().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def model_config(self) -> ModelConfig:
        spec = self.scene_template()
        return ModelConfig(
            channels=self.channels,
            num_queries=self.num_queries,
            embed_dim=self.embed_dim,
            stages=self.stages,
            d_max=self.d_max,
            num_heads=self.num_heads,
            thing_classes=spec.thing_classes,
            stuff_classes=spec.stuff_classes,
            query_linking=self.query_linking,
            dense_init=self.dense_init,
            instance_depth=self.instance_depth,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        stage = tuple(self.lambda_stage) + (self.lambda_stage[-1],) * max(0, self.stages + 1 - len(self.lambda_stage))
        return LossWeights(
            depth=self.lambda_depth,
            mask=self.lambda_mask,
            cls=self.lambda_cls,
            track=self.lambda_track,
            stage=stage,
            si=self.lambda_si,
        )

    def scene_template(self) -> SceneSpec:
        return SceneSpec(
            frames=self.frames,
            height=self.height,
            width=self.width,
            n_things=(self.n_things_min, self.n_things_max),
            depth_range=(self.d_min, self.d_far),
        )

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        return replace(self, **{k: _coerce(self, k, v) for k, v in pairs.items()})

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in asdict(self).items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _field_types() -> dict[str, object]:
    return {f.name: f.default for f in fields(ExperimentConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    return str(v)


def _coerce(cfg: ExperimentConfig, key: str, raw: str):
    defaults = _field_types()
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    proto = defaults[key]
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            v = float(raw)
            if math.isnan(v):
                raise ValueError(raw)
            return v
        if isinstance(proto, tuple):
            elem = type(proto[0]) if proto else float
            return tuple(elem(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_pairs(Path(path).read_text().splitlines()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg
