"""Train a small model end to end, evaluate it, and run online inference.

This uses a shrunken configuration (96 training clips, 48x48 frames, one
refinement stage, 80 epochs) so it finishes in about two minutes on a CPU.
The full desk-scale run is ``polydvps train`` with the default config.

    python demos/06_train_and_infer.py
"""
import time
from pathlib import Path

import numpy as np

from polydvps import synthgen
from polydvps.config import ExperimentConfig
from polydvps.fuse import infer_sequence, write_predictions
from polydvps.train import evaluate_model, thresholds_for, train

OUT = Path(__file__).with_name("out")

cfg = ExperimentConfig().with_overrides(
    {"n_clips": "104", "height": "48", "width": "48", "epochs": "80", "channels": "32", "num_queries": "10", "stages": "1", "min_area": "8"}
)
clips = [synthgen.generate_clip(s) for s in synthgen.default_specs(cfg.n_clips, cfg.data_seed, cfg.scene_template())]
train_clips, val_clips = clips[:96], clips[96:]

t0 = time.time()
model, hist = train(cfg, train_clips, progress=lambda e, row: e % 10 == 9 and print(f"epoch {e}: loss {row['total']:.2f}"))
print(f"trained in {time.time() - t0:.0f}s")

ev = evaluate_model(model, val_clips, cfg)
print(ev.report.to_text())

res = infer_sequence(val_clips[0].images, model, thresholds=thresholds_for(cfg))
print("frame 0 instance ids:", sorted(int(i) for i in np.unique(res[0].panoptic[1]) if i))
write_predictions(res, OUT / "predictions")
print(f"wrote {len(res)} frames to {OUT / 'predictions'}")
