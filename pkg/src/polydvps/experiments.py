"""Ablation orchestration: named variant matrices run over several seeds.

Each variant is a set of config overrides applied on top of a base config.
Results are cached on disk keyed by the resolved config hash, so reruns of
the same matrix (from the command line or the acceptance suite) reuse
finished runs.
"""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

from . import synthgen
from .config import ExperimentConfig
from .train import evaluate_model, train

log = logging.getLogger(__name__)

# shortened schedule used by every ablation row
SMOKE_OVERRIDES = {"epochs": "5", "train_clips": "20"}

MATRICES: dict[str, dict[str, dict[str, str]]] = {
    "linking_init": {
        "both": {},
        "no_linking": {"query_linking": "false"},
        "no_init": {"dense_init": "false"},
        "neither": {"query_linking": "false", "dense_init": "false"},
    },
    "lambda_depth": {f"lambda_depth={v}": {"lambda_depth": v} for v in ("0.1", "1", "5", "10")},
    "stages": {f"S={s}": {"stages": s} for s in ("1", "2", "3")},
    "hybrid": {"full": {}, "hybrid": {"instance_depth": "false"}},
}

SUMMARY_KEYS = (
    "pq",
    "pq_thing",
    "pq_stuff",
    "abs_rel",
    "aq",
    "dstq",
    "depth_aware",
    "depth_aware_total",
    "depth_aware_dense",
    "abs_rel_dense",
    "id_switches_separated",
    "train_seconds",
)


@dataclass
class VariantResult:
    name: str
    seed: int
    config_hash: str
    values: dict[str, float]


def smoke_config(base: ExperimentConfig) -> ExperimentConfig:
    return base.with_overrides(SMOKE_OVERRIDES)


def run_variant(cfg: ExperimentConfig, train_clips, val_clips, cache_dir=None) -> dict[str, float]:
    """Train and evaluate one config; returns the flat metric dict (cached by config hash)."""
    cache = Path(cache_dir) / f"{cfg.hash()}.json" if cache_dir else None
    if cache is not None and cache.exists():
        return json.loads(cache.read_text())
    model, hist = train(cfg, train_clips)
    ev = evaluate_model(model, val_clips, cfg)
    values = {k: float(v) for k, v in ev.report.as_dict().items()}
    values["train_seconds"] = hist.seconds
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(values, sort_keys=True))
    return values


def run_matrix(
    matrix: str,
    base: ExperimentConfig,
    seeds=(0, 1, 2),
    data: tuple[list[synthgen.ClipSample], list[synthgen.ClipSample]] | None = None,
    cache_dir=None,
    smoke: bool = True,
) -> list[VariantResult]:
    if matrix not in MATRICES:
        raise KeyError(f"unknown ablation matrix {matrix!r}; choose from {sorted(MATRICES)}")
    if data is None:
        clips = [synthgen.generate_clip(s) for s in synthgen.default_specs(base.n_clips, base.data_seed, base.scene_template())]
        n_val = int(round(base.n_clips * base.val_fraction))
        data = (clips[: len(clips) - n_val], clips[len(clips) - n_val :])
    train_clips, val_clips = data
    root = smoke_config(base) if smoke else base
    out = []
    for name, overrides in MATRICES[matrix].items():
        for seed in seeds:
            cfg = root.with_overrides({**overrides, "seed": str(seed)})
            cfg.validate()
            log.info("ablation %s/%s seed %d", matrix, name, seed)
            out.append(VariantResult(name, seed, cfg.hash(), run_variant(cfg, train_clips, val_clips, cache_dir)))
    return out


def medians(results: list[VariantResult], key: str) -> dict[str, float]:
    """Median of ``key`` over seeds, per variant name (in first-seen order)."""
    groups: dict[str, list[float]] = {}
    for r in results:
        groups.setdefault(r.name, []).append(r.values[key])
    return {name: statistics.median(v) for name, v in groups.items()}


def results_table(results: list[VariantResult], keys=SUMMARY_KEYS) -> str:
    """Tab-separated rows (variant, seed, hash, keys...) followed by per-variant median rows."""
    keys = [k for k in keys if all(k in r.values for r in results)]
    lines = ["\t".join(["variant", "seed", "config_hash", *keys])]
    for r in results:
        lines.append("\t".join([r.name, str(r.seed), r.config_hash, *(f"{r.values[k]:.6g}" for k in keys)]))
    meds = {k: medians(results, k) for k in keys}
    for name in dict.fromkeys(r.name for r in results):
        lines.append("\t".join([name, "median", "-", *(f"{meds[k][name]:.6g}" for k in keys)]))
    return "\n".join(lines) + "\n"
