"""On-disk formats for clips, predictions and checkpoints.

* ``frame_<t>.img``: 16-byte header (magic ``PDVI``, then C, H, W as
  little-endian uint32) followed by little-endian float32 CHW data.
* ``panoptic_<t>.pan``: two little-endian uint16 planes, class then instance.
* ``depth_<t>.dpt``: little-endian uint16, meters x 256, 0 = invalid.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
IMAGE_MAGIC = b"PDVI"
DEPTH_SCALE = 256.0

_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 3:
        raise FormatError("image must be C x H x W")
    c, h, w = image.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, c, h, w))
        f.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != c * h * w:
        raise FormatError(f"{path}: expected {c * h * w} values, found {data.size}")
    return data.reshape(c, h, w).astype(np.float32)


def write_panoptic(path, pan: np.ndarray) -> None:
    pan = np.asarray(pan)
    if pan.ndim != 3 or pan.shape[0] != 2:
        raise FormatError("panoptic must be 2 x H x W")
    if pan.min() < 0 or pan.max() > 0xFFFF:
        raise FormatError("panoptic values must fit uint16")
    Path(path).write_bytes(pan.astype("<u2").tobytes())


def read_panoptic(path, height: int, width: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<u2")
    if data.size != 2 * height * width:
        raise FormatError(f"{path}: size does not match 2 x {height} x {width}")
    return data.reshape(2, height, width).astype(np.int32)


def encode_depth(depth: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE)
    return np.clip(q, 0, 0xFFFF).astype("<u2")


def write_depth(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(encode_depth(depth).tobytes())


def read_depth(path, height: int, width: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<u2")
    if data.size != height * width:
        raise FormatError(f"{path}: size does not match {height} x {width}")
    return (data.reshape(height, width).astype(np.float64) / DEPTH_SCALE).astype(np.float32)
