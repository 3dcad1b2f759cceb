"""Command-line entry points: gen-data, train, eval, infer, ablate.

Every command takes ``--config FILE`` (flat ``key = value`` text) and any
number of ``--set key=value`` overrides. Exit codes: 0 success, 2 config
error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datafmt, experiments, metrics, synthgen
from .checkpoint import CheckpointError, load_model_state
from .config import ConfigError, ExperimentConfig, load_config
from .fuse import infer_sequence, write_predictions
from .model import PolyphonicFormer
from .train import Evaluation, TrainingDiverged, evaluate_model, prepare_data, thresholds_for, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("polydvps")


class RuntimeFailure(RuntimeError):
    pass


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config is not None and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _dataset(cfg: ExperimentConfig, split: str) -> list[synthgen.ClipSample]:
    root = Path(cfg.data_root)
    if not (root / "manifest.json").exists():
        raise RuntimeFailure(f"no dataset at {root}; run gen-data first")
    clips = synthgen.load_split(root, split)
    if not clips:
        raise RuntimeFailure(f"split {split!r} of {root} is empty")
    return clips


def _load_model(cfg: ExperimentConfig, path) -> PolyphonicFormer:
    path = Path(path)
    if not path.exists():
        raise RuntimeFailure(f"checkpoint not found: {path}")
    model = PolyphonicFormer(cfg.model_config())
    extra = load_model_state(path, model)
    if extra.get("config_hash") and extra["config_hash"] != cfg.hash():
        log.warning("checkpoint was trained with config %s, evaluating with %s", extra["config_hash"], cfg.hash())
    return model


# ---------------------------------------------------------------- reports and plots


def write_report(report: metrics.MetricReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.kv").write_text(report.to_kv())
    cells = out_dir / "cells"
    cells.mkdir(exist_ok=True)
    for (k, lam), (v, th, st) in report.dvpq.items():
        text = f"config_hash = {report.config_hash}\nk = {k}\nlambda = {lam:g}\ndvpq = {v:.6f}\nthing = {th:.6f}\nstuff = {st:.6f}\n"
        (cells / f"k{k}_lambda{lam:g}.kv").write_text(text)


def plot_dvpq_grid(report: metrics.MetricReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted({k for k, _ in report.dvpq})
    lams = sorted({lam for _, lam in report.dvpq}, reverse=True)
    grid = np.array([[100 * report.dvpq.get((k, lam), (np.nan,) * 3)[0] for k in ks] for lam in lams])
    fig, ax = plt.subplots(figsize=(1.2 * len(ks) + 2, 0.8 * len(lams) + 1.5))
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=100)
    ax.set_xticks(range(len(ks)), [f"k={k}" for k in ks])
    ax.set_yticks(range(len(lams)), [f"λ={lam:g}" for lam in lams])
    for i in range(len(lams)):
        for j in range(len(ks)):
            ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", color="w")
    fig.colorbar(im, ax=ax, label="DVPQ")
    ax.set_title(f"DVPQ grid ({report.config_hash})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_depth_error(preds: list[metrics.Sequence], gts: list[metrics.Sequence], path: Path, max_frames: int = 4) -> None:
    """Relative depth error maps for the first frames of the first clip, next to ground truth."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p, g = preds[0], gts[0]
    n = min(max_frames, len(g))
    fig, axes = plt.subplots(2, n, figsize=(2.4 * n, 4.8), squeeze=False)
    for t in range(n):
        gd = g.depth[t]
        err = np.where(gd > 0, np.abs(p.depth[t] - gd) / np.where(gd > 0, gd, 1), np.nan)
        axes[0, t].imshow(gd, cmap="magma_r")
        axes[0, t].set_title(f"gt depth t={t}")
        im = axes[1, t].imshow(err, cmap="inferno", vmin=0, vmax=0.25)
        axes[1, t].set_title("abs rel error")
        for ax in axes[:, t]:
            ax.axis("off")
    fig.colorbar(im, ax=axes[1].tolist(), shrink=0.8)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_evaluation(ev: Evaluation, gts: list[metrics.Sequence], out_dir: Path) -> None:
    write_report(ev.report, out_dir)
    plot_dvpq_grid(ev.report, out_dir / "dvpq_grid.png")
    plot_depth_error(ev.predictions, gts, out_dir / "depth_error.png")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    root = Path(cfg.data_root)
    if (root / "manifest.json").exists() and not args.force:
        log.info("dataset already present at %s (use --force to regenerate)", root)
    else:
        if root.exists() and args.force:
            import shutil

            shutil.rmtree(root)
        prepare_data(cfg)
    manifest = synthgen.load_manifest(root)
    splits: dict[str, int] = {}
    for e in manifest["clips"]:
        splits[e["split"]] = splits.get(e["split"], 0) + 1
    print(f"{root}: {len(manifest['clips'])} clips " + ", ".join(f"{k} {v}" for k, v in sorted(splits.items())))


def cmd_train(cfg: ExperimentConfig, args) -> None:
    clips = _dataset(cfg, "train")
    val = _dataset(cfg, "val")
    run_dir = Path(cfg.run_dir)

    def progress(epoch, rec):
        print(f"epoch {epoch + 1}/{cfg.epochs} loss {rec['total']:.4f}", flush=True)

    model, hist = train(cfg, clips, run_dir, progress=progress)
    print(f"trained {cfg.epochs} epochs in {hist.seconds:.1f} s; checkpoint {run_dir / 'checkpoint.pdck'}")
    ev = evaluate_model(model, val, cfg)
    emit_evaluation(ev, [metrics.Sequence(c.panoptic, c.depth) for c in val], run_dir / "val")
    print(ev.report.to_text(), end="")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    clips = _dataset(cfg, args.split)
    out_dir = Path(args.out) if args.out else Path(cfg.run_dir) / f"eval_{args.split}"
    gts = [metrics.Sequence(c.panoptic, c.depth) for c in clips]
    mc = cfg.model_config()
    if args.gt_as_prediction:
        report = metrics.evaluate(gts, gts, mc.num_classes, mc.thing_classes, cfg.eval_ks, cfg.eval_lambdas, cfg.hash())
        ev = Evaluation(report, gts, [g.depth for g in gts])
    else:
        model = _load_model(cfg, args.checkpoint or Path(cfg.run_dir) / "checkpoint.pdck")
        ev = evaluate_model(model, clips, cfg)
        for i, p in enumerate(ev.predictions):
            d = out_dir / "predictions" / f"clip_{i:05d}"
            d.mkdir(parents=True, exist_ok=True)
            for t in range(len(p)):
                datafmt.write_panoptic(d / f"panoptic_{t}.pan", p.panoptic[t])
                datafmt.write_depth(d / f"depth_{t}.dpt", p.depth[t])
    emit_evaluation(ev, gts, out_dir)
    print(ev.report.to_text(), end="")
    print(f"report written to {out_dir}")


def cmd_infer(cfg: ExperimentConfig, args) -> None:
    src = Path(args.input)
    frames = sorted(src.glob("frame_*.img"), key=lambda p: int(p.stem.split("_")[1]))
    if not frames:
        raise RuntimeFailure(f"no frame_<t>.img files in {src}")
    images = np.stack([datafmt.read_image(f) for f in frames])
    model = _load_model(cfg, args.checkpoint or Path(cfg.run_dir) / "checkpoint.pdck")
    results = infer_sequence(
        images, model, thresholds=thresholds_for(cfg), track_threshold=cfg.track_threshold, track_momentum=cfg.track_momentum
    )
    out = Path(args.out) if args.out else src / "pred"
    write_predictions(results, out)
    n_tracks = len({tid for r in results for tid in r.instance_index})
    print(f"wrote {len(results)} frames to {out} ({n_tracks} tracks)")


def cmd_ablate(cfg: ExperimentConfig, args) -> None:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    names = sorted(experiments.MATRICES) if args.matrix == "all" else [args.matrix]
    clips = _dataset(cfg, "train")
    val = _dataset(cfg, "val")
    out_dir = Path(cfg.run_dir) / "ablations"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        results = experiments.run_matrix(
            name, cfg, seeds, data=(clips, val), cache_dir=out_dir / "cache", smoke=not args.full_schedule
        )
        table = experiments.results_table(results)
        (out_dir / f"{name}.tsv").write_text(table)
        print(f"# {name}")
        print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polydvps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.set_defaults(func=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "render the synthetic dataset to data_root")
    g.add_argument("--force", action="store_true", help="delete and regenerate an existing dataset")
    add("train", cmd_train, "train on the train split, then evaluate on val")
    e = add("eval", cmd_eval, "evaluate a checkpoint and write reports and plots")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.add_argument("--gt-as-prediction", action="store_true", help="score ground truth against itself")
    i = add("infer", cmd_infer, "run inference on one clip directory")
    i.add_argument("--input", required=True, help="directory holding frame_<t>.img files")
    i.add_argument("--checkpoint")
    i.add_argument("--out")
    a = add("ablate", cmd_ablate, "run an ablation matrix over seeds")
    a.add_argument("--matrix", default="all", choices=["all", *sorted(experiments.MATRICES)])
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--full-schedule", action="store_true", help="use the configured schedule instead of the smoke one")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(cfg, args)
    except (RuntimeFailure, TrainingDiverged, CheckpointError, datafmt.FormatError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
