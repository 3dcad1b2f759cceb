"""Toy depth-aware video panoptic clips with exact ground truth.

Scenes are a ground plane (depth grows linearly toward the horizon) under a
sky held at the far end of the depth range, with rectangles, circles and
triangles standing on the ground and drifting at constant velocity. Each
object is fronto-parallel, so its depth is constant over its pixels; its
apparent size and ground-contact row both follow from that depth, which is
what makes monocular depth learnable here.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datafmt

VOID = 255
SHAPES = ("rect", "circle", "triangle")
# apparent height in pixels is scale * SIZE_FACTOR * H / depth
SIZE_FACTOR = 3.0

_STUFF_COLORS = np.array([[0.45, 0.40, 0.35], [0.55, 0.75, 0.95]], dtype=np.float32)
_THING_COLORS = np.array(
    [[0.85, 0.20, 0.20], [0.20, 0.70, 0.25], [0.95, 0.85, 0.20], [0.60, 0.25, 0.80], [0.15, 0.60, 0.80]],
    dtype=np.float32,
)


class SceneSpecError(ValueError):
    """Raised for scene specs that violate their invariants or cannot be rendered."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 6
    height: int = 64
    width: int = 64
    n_things: tuple[int, int] = (1, 5)
    thing_classes: tuple[int, ...] = (2, 3, 4)
    stuff_classes: tuple[int, ...] = (0, 1)
    depth_range: tuple[float, float] = (2.0, 80.0)
    max_pixel_velocity: float = 2.0
    max_depth_velocity: float = 0.3
    horizon: float = 0.375
    noise_sigma: float = 0.02
    # rejection-sample placements so that no two things ever touch
    separated: bool = False

    def validate(self) -> None:
        if self.frames < 1:
            raise SceneSpecError("frames must be >= 1")
        if self.height < 16 or self.width < 16:
            raise SceneSpecError("height and width must be >= 16")
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise SceneSpecError("depth_range must satisfy 0 < d_min < d_max")
        if d_max * datafmt.DEPTH_SCALE > np.iinfo(np.uint16).max:
            raise SceneSpecError("d_max exceeds the uint16 depth encoding")
        if set(self.thing_classes) & set(self.stuff_classes):
            raise SceneSpecError("thing and stuff label sets must be disjoint")
        if len(self.stuff_classes) != 2:
            raise SceneSpecError("exactly two stuff classes (ground, sky) are rendered")
        if not self.thing_classes:
            raise SceneSpecError("need at least one thing class")
        if VOID in self.thing_classes or VOID in self.stuff_classes:
            raise SceneSpecError("class 255 is reserved for void")
        lo, hi = self.n_things
        if not 0 <= lo <= hi:
            raise SceneSpecError("n_things must be a range 0 <= lo <= hi")
        if hi > self.capacity:
            raise SceneSpecError(
                f"{hi} things cannot fit a {self.height}x{self.width} canvas (capacity {self.capacity})"
            )
        if not 0.1 <= self.horizon <= 0.7:
            raise SceneSpecError("horizon must lie in [0.1, 0.7] of the height")

    @property
    def capacity(self) -> int:
        return (self.height * self.width) // 256

    @property
    def ground_near(self) -> float:
        return 2.0 * self.depth_range[0]

    @property
    def ground_far(self) -> float:
        return 0.75 * self.depth_range[1]

    @property
    def horizon_row(self) -> int:
        return int(round(self.horizon * self.height))


@dataclass
class ClipSample:
    images: np.ndarray  # T x 3 x H x W float32 in [0, 1]
    panoptic: np.ndarray  # T x 2 x H x W int32 (class, instance)
    depth: np.ndarray  # T x H x W float32 meters, 0 = invalid
    tracks: dict[int, list[tuple[int, np.ndarray]]] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.images.shape[0]

    def equals(self, other: "ClipSample") -> bool:
        if not (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.panoptic, other.panoptic)
            and np.array_equal(self.depth, other.depth)
        ):
            return False
        if sorted(self.tracks) != sorted(other.tracks):
            return False
        for k, occ in self.tracks.items():
            occ2 = other.tracks[k]
            if len(occ) != len(occ2):
                return False
            for (t1, m1), (t2, m2) in zip(occ, occ2):
                if t1 != t2 or not np.array_equal(m1, m2):
                    return False
        return True


@dataclass(frozen=True)
class ThingSpec:
    inst_id: int
    cls: int
    shape: str
    depth0: float
    depth_vel: float
    x0: float
    x_vel: float
    scale: float
    aspect: float
    brightness: float


def quantize_depth(d):
    return np.round(np.asarray(d, dtype=np.float64) * datafmt.DEPTH_SCALE) / datafmt.DEPTH_SCALE


def ground_depth_row(spec: SceneSpec) -> np.ndarray:
    """Depth of the ground plane for every image row (sky rows get the far limit)."""
    h, hz = spec.height, spec.horizon_row
    rows = np.arange(h, dtype=np.float64)
    frac = np.clip((h - 1 - rows) / max(h - 1 - hz, 1), 0.0, 1.0)
    d = spec.ground_near + (spec.ground_far - spec.ground_near) * frac
    d[rows < hz] = spec.depth_range[1]
    return quantize_depth(d)


def _contact_row(spec: SceneSpec, z: float) -> float:
    h, hz = spec.height, spec.horizon_row
    frac = (z - spec.ground_near) / (spec.ground_far - spec.ground_near)
    return (h - 1) - frac * (h - 1 - hz)


def _object_depth_limits(spec: SceneSpec) -> tuple[float, float]:
    near = spec.ground_near
    return near, min(4.0 * near, 0.5 * (near + spec.ground_far))


def thing_geometry(spec: SceneSpec, th: ThingSpec, t: int):
    lo, hi = _object_depth_limits(spec)
    z = float(np.clip(th.depth0 + th.depth_vel * t, lo, hi))
    z = float(quantize_depth(z))
    cx = th.x0 + th.x_vel * t
    yb = _contact_row(spec, z)
    h = th.scale * SIZE_FACTOR * spec.height / z
    w = h * th.aspect if th.shape != "circle" else h
    return z, cx, yb, h, w


def shape_mask(shape: str, cx: float, yb: float, h: float, w: float, height: int, width: int) -> np.ndarray:
    """Rasterize one shape at pixel centers. ``yb`` is the bottom (ground-contact) row."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    top = yb - h
    if shape == "rect":
        return (np.abs(xx - cx) <= w / 2) & (yy >= top) & (yy <= yb)
    if shape == "circle":
        r = h / 2
        return (xx - cx) ** 2 + (yy - (yb - r)) ** 2 <= r * r
    if shape == "triangle":
        rel = (yy - top) / max(h, 1e-9)
        return (yy >= top) & (yy <= yb) & (np.abs(xx - cx) <= (w / 2) * rel)
    raise ValueError(f"unknown shape {shape!r}")


def sample_things(spec: SceneSpec, rng: np.random.Generator) -> list[ThingSpec]:
    lo, hi = spec.n_things
    n = int(rng.integers(lo, hi + 1))
    zlo, zhi = _object_depth_limits(spec)
    things = []
    for i in range(n):
        cls = int(spec.thing_classes[int(rng.integers(len(spec.thing_classes)))])
        things.append(
            ThingSpec(
                inst_id=i + 1,
                cls=cls,
                shape=SHAPES[spec.thing_classes.index(cls) % len(SHAPES)],
                depth0=float(rng.uniform(zlo, zhi)),
                depth_vel=float(rng.uniform(-spec.max_depth_velocity, spec.max_depth_velocity)),
                x0=float(rng.uniform(0.1 * spec.width, 0.9 * spec.width)),
                x_vel=float(rng.uniform(-spec.max_pixel_velocity, spec.max_pixel_velocity)),
                scale=float(rng.uniform(0.8, 1.2)),
                aspect=float(rng.uniform(0.6, 1.4)),
                brightness=float(rng.uniform(0.7, 1.3)),
            )
        )
    return things


def _masks_for(spec: SceneSpec, things: list[ThingSpec], t: int):
    out = []
    for th in things:
        z, cx, yb, h, w = thing_geometry(spec, th, t)
        out.append((z, shape_mask(th.shape, cx, yb, h, w, spec.height, spec.width)))
    return out


def _is_separated(spec: SceneSpec, things: list[ThingSpec], gap: int = 2) -> bool:
    for t in range(spec.frames):
        masks = _masks_for(spec, things, t)
        for _, m in masks:
            if not m.any():
                return False
        grown = [_dilate(m, gap) for _, m in masks]
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                if (grown[i] & masks[j][1]).any():
                    return False
    return True


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
    return out


def generate_clip(spec: SceneSpec) -> ClipSample:
    """Render one clip. Pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    things = sample_things(spec, rng)
    if spec.separated and things:
        for _ in range(200):
            if _is_separated(spec, things):
                break
            things = sample_things(spec, rng)
        else:
            raise SceneSpecError("could not place separated things on this canvas")

    return render_clip(spec, things, rng)


def render_clip(spec: SceneSpec, things: list[ThingSpec], rng: np.random.Generator | None = None) -> ClipSample:
    """Render explicit things over the background; ``rng`` drives the image noise."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    T, H, W = spec.frames, spec.height, spec.width
    g_depth = ground_depth_row(spec)
    hz = spec.horizon_row
    ground_cls, sky_cls = spec.stuff_classes

    images = np.empty((T, 3, H, W), dtype=np.float32)
    panoptic = np.zeros((T, 2, H, W), dtype=np.int32)
    depth = np.empty((T, H, W), dtype=np.float32)
    tracks: dict[int, list[tuple[int, np.ndarray]]] = {th.inst_id: [] for th in things}

    for t in range(T):
        cls_map = np.where(np.arange(H)[:, None] < hz, sky_cls, ground_cls) * np.ones((1, W), dtype=np.int32)
        inst_map = np.zeros((H, W), dtype=np.int32)
        dep = np.broadcast_to(g_depth[:, None], (H, W)).astype(np.float64).copy()
        color = np.where(
            (np.arange(H)[:, None] < hz)[None],
            _STUFF_COLORS[1][:, None, None],
            _STUFF_COLORS[0][:, None, None],
        ) * np.ones((3, H, W), dtype=np.float32)

        placed = [(z, th, m) for th, (z, m) in zip(things, _masks_for(spec, things, t))]
        # farthest first so the nearest surface ends up on top
        placed.sort(key=lambda p: (-p[0], -p[1].inst_id))
        for z, th, m in placed:
            cls_map[m] = th.cls
            inst_map[m] = th.inst_id
            dep[m] = z
            col = _THING_COLORS[spec.thing_classes.index(th.cls) % len(_THING_COLORS)]
            color[:, m] = np.clip(col * th.brightness, 0.0, 1.0)[:, None]

        noise = rng.normal(0.0, spec.noise_sigma, size=(3, H, W))
        images[t] = np.clip(color + noise, 0.0, 1.0).astype(np.float32)
        panoptic[t, 0] = cls_map
        panoptic[t, 1] = inst_map
        depth[t] = dep.astype(np.float32)
        for th in things:
            vis = inst_map == th.inst_id
            if vis.any():
                tracks[th.inst_id].append((t, vis))

    tracks = {k: v for k, v in tracks.items() if v}
    return ClipSample(images=images, panoptic=panoptic, depth=depth, tracks=tracks)



def tracks_from_panoptic(panoptic: np.ndarray) -> dict[int, list[tuple[int, np.ndarray]]]:
    tracks: dict[int, list[tuple[int, np.ndarray]]] = {}
    for t in range(panoptic.shape[0]):
        inst = panoptic[t, 1]
        for i in np.unique(inst):
            if i == 0:
                continue
            tracks.setdefault(int(i), []).append((t, inst == i))
    return dict(sorted(tracks.items()))


def is_well_separated(clip: ClipSample, gap: int = 2) -> bool:
    """True when every instance is visible in every frame and no two instances come within ``gap`` px."""
    T = clip.num_frames
    for k, occ in clip.tracks.items():
        if len(occ) != T:
            return False
    for t in range(T):
        inst = clip.panoptic[t, 1]
        ids = [i for i in np.unique(inst) if i > 0]
        for a in ids:
            grown = _dilate(inst == a, gap)
            others = (inst > 0) & (inst != a)
            if (grown & others).any():
                return False
    return True


def default_specs(n_clips: int, seed: int = 0, template: SceneSpec | None = None) -> list[SceneSpec]:
    from dataclasses import replace

    template = template or SceneSpec()
    seeds = np.random.SeedSequence(seed).generate_state(n_clips) if n_clips else []
    return [replace(template, seed=int(s)) for s in seeds]


def split_for(index: int, n_clips: int, val_fraction: float) -> str:
    n_train = n_clips - int(round(val_fraction * n_clips))
    return "train" if index < n_train else "val"


def write_dataset(specs: list[SceneSpec], root, val_fraction: float = 0.2) -> dict:
    """Render and serialize clips; returns the manifest (also written to ``root/manifest.json``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        clip = generate_clip(spec)
        split = split_for(i, len(specs), val_fraction)
        clip_id = f"clip_{i:05d}"
        rel = f"{split}/{clip_id}"
        _write_clip_atomic(clip, root / split, clip_id)
        entries.append(
            {
                "id": clip_id,
                "split": split,
                "path": rel,
                "frames": clip.num_frames,
                "height": int(clip.images.shape[2]),
                "width": int(clip.images.shape[3]),
                "seed": int(spec.seed),
                "thing_classes": list(spec.thing_classes),
                "stuff_classes": list(spec.stuff_classes),
                "depth_range": list(spec.depth_range),
            }
        )
    manifest = {"format": datafmt.FORMAT_VERSION, "clips": entries}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, root / "manifest.json")
    return manifest


def _write_clip_atomic(clip: ClipSample, parent: Path, clip_id: str) -> None:
    parent.mkdir(parents=True, exist_ok=True)
    final = parent / clip_id
    tmpdir = Path(tempfile.mkdtemp(prefix=f".{clip_id}.", dir=parent))
    try:
        for t in range(clip.num_frames):
            datafmt.write_image(tmpdir / f"frame_{t}.img", clip.images[t])
            datafmt.write_panoptic(tmpdir / f"panoptic_{t}.pan", clip.panoptic[t])
            datafmt.write_depth(tmpdir / f"depth_{t}.dpt", clip.depth[t])
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmpdir, final)
    except BaseException:
        shutil.rmtree(tmpdir, ignore_errors=True)
        raise


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_clip(root, entry: dict) -> ClipSample:
    d = Path(root) / entry["path"]
    H, W, T = entry["height"], entry["width"], entry["frames"]
    images = np.stack([datafmt.read_image(d / f"frame_{t}.img") for t in range(T)])
    panoptic = np.stack([datafmt.read_panoptic(d / f"panoptic_{t}.pan", H, W) for t in range(T)])
    depth = np.stack([datafmt.read_depth(d / f"depth_{t}.dpt", H, W) for t in range(T)])
    return ClipSample(images=images, panoptic=panoptic, depth=depth, tracks=tracks_from_panoptic(panoptic))


def load_split(root, split: str) -> list[ClipSample]:
    manifest = load_manifest(root)
    return [load_clip(root, e) for e in manifest["clips"] if e["split"] == split]
