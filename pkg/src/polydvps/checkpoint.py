"""Checkpoint file: versioned magic line, a text header of tensor names and shapes, then raw float32 data.

Layout::

    PDVPS-CKPT v1\\n
    <n_tensors>\\n
    <name> <dim0>x<dim1>x...\\n   (one line per tensor; "scalar" for 0-d)
    <extra json line>\\n
    <little-endian float32 payload, tensors concatenated in header order>
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

MAGIC = "PDVPS-CKPT v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, torch.Tensor], extra: dict | None = None) -> None:
    path = Path(path)
    lines = [MAGIC, str(len(state))]
    blobs = []
    for name, t in state.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name has whitespace: {name!r}")
        arr = t.detach().cpu().numpy().astype("<f4")
        lines.append(f"{name} {'x'.join(map(str, arr.shape)) if arr.ndim else 'scalar'}")
        blobs.append(arr.tobytes())
    lines.append(json.dumps(extra or {}, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = raw.index(b"\n", pos)
        s = raw[pos:end].decode()
        pos = end + 1
        return s

    try:
        if line() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        n = int(line())
        header = [line().split(" ") for _ in range(n)]
        extra = json.loads(line())
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header") from e
    state = {}
    for name, shape_s in header:
        shape = () if shape_s == "scalar" else tuple(int(x) for x in shape_s.split("x"))
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return state, extra


def save_model(path, model: torch.nn.Module, extra: dict | None = None) -> None:
    save_checkpoint(path, {k: v for k, v in model.state_dict().items()}, extra)


def load_model_state(path, model: torch.nn.Module) -> dict:
    state, extra = load_checkpoint(path)
    own = model.state_dict()
    missing = set(own) - set(state)
    unexpected = set(state) - set(own)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not fit the model (missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
    model.load_state_dict({k: state[k].to(own[k].dtype).reshape(own[k].shape) for k in own})
    return extra
