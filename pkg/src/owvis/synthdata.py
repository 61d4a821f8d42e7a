"""Deterministic moving-shapes videos in YouTube-VIS layout."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .data_model import Category, Dataset, InstanceTrack, VideoRecord, dataset_to_json

GEOMETRIES = ("disk", "square", "triangle", "bar", "ring")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeClass:
    name: str
    super_category: str
    geometry: str
    color: tuple[float, float, float]


# Classes 4 and 5 reuse the colors of 1 and 2 so that an unseen class can only
# be told apart by its outline.
DESK_CLASSES = (
    ShapeClass("person", "Human", "disk", (0.9, 0.2, 0.2)),
    ShapeClass("dog", "Animals", "square", (0.2, 0.85, 0.25)),
    ShapeClass("cat", "Animals", "triangle", (0.25, 0.35, 0.95)),
    ShapeClass("car", "Vehicle", "bar", (0.9, 0.2, 0.2)),
    ShapeClass("skateboard", "Others", "ring", (0.2, 0.85, 0.25)),
)

# One class per group used by the five reference splits.
FIVE_SPLIT_CLASSES = (
    ShapeClass("person", "Human", "disk", (0.9, 0.2, 0.2)),
    ShapeClass("dog", "Animals", "square", (0.2, 0.85, 0.25)),
    ShapeClass("tiger", "Animals", "triangle", (0.95, 0.6, 0.1)),
    ShapeClass("frog", "Aquatic Animals", "ring", (0.3, 0.9, 0.9)),
    ShapeClass("shark", "Aquatic Animals", "bar", (0.25, 0.35, 0.95)),
    ShapeClass("car", "Vehicle", "square", (0.9, 0.9, 0.2)),
    ShapeClass("airplane", "Vehicle", "triangle", (0.8, 0.8, 0.8)),
    ShapeClass("skateboard", "Others", "bar", (0.8, 0.3, 0.8)),
    ShapeClass("flying_disc", "Others", "disk", (0.5, 0.5, 0.1)),
)


@dataclass
class SynthConfig:
    num_videos: int = 24
    frames_per_video: int = 3
    resolution: tuple[int, int] = (64, 64)
    shape_classes: tuple[ShapeClass, ...] = DESK_CLASSES
    instances_per_video: tuple[int, int] = (3, 3)
    motion: tuple[float, float] = (-2.0, 2.0)
    radius: tuple[float, float] = (8.0, 12.0)
    noise: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        h, w = self.resolution
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            raise SynthConfigError(f"resolution {self.resolution} must be positive multiples of 16")
        if len(self.shape_classes) < 2:
            raise SynthConfigError("need at least 2 shape classes")
        for sc in self.shape_classes:
            if sc.geometry not in GEOMETRIES:
                raise SynthConfigError(f"unknown geometry {sc.geometry!r}")
        lo, hi = self.instances_per_video
        if lo < 1 or hi < lo:
            raise SynthConfigError(f"bad instances_per_video {self.instances_per_video}")
        if self.num_videos < 1 or self.frames_per_video < 1:
            raise SynthConfigError("num_videos and frames_per_video must be positive")
        if 2 * self.radius[1] >= min(h, w):
            raise SynthConfigError("radius too large for the frame")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        classes = d.pop("shape_classes", None)
        if classes is None:
            classes = FIVE_SPLIT_CLASSES if preset == "fivesplit" else DESK_CLASSES
        else:
            classes = tuple(
                ShapeClass(c["name"], c["super_category"], c["geometry"], tuple(c["color"]))
                for c in classes
            )
        for key in ("resolution", "instances_per_video", "motion", "radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(shape_classes=tuple(classes), **d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def rasterize(geometry: str, cx: float, cy: float, r: float, height: int, width: int) -> np.ndarray:
    """Binary mask of a shape centred at (cx, cy) in pixel units, sampled at pixel centres."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    if geometry == "disk":
        return dx * dx + dy * dy <= r * r
    if geometry == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if geometry == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if geometry == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.35 * r)
    if geometry == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise SynthConfigError(f"unknown geometry {geometry!r}")


def _trajectory(rng, length: int, r: float, height: int, width: int, motion) -> list[tuple[float, float]]:
    pos = np.array([rng.uniform(r, width - r), rng.uniform(r, height - r)])
    vel = rng.uniform(motion[0], motion[1], size=2)
    lo = np.array([r, r])
    hi = np.array([width - r, height - r])
    out = []
    for _ in range(length):
        out.append((float(pos[0]), float(pos[1])))
        pos = pos + vel
        for k in range(2):
            if pos[k] < lo[k]:
                pos[k] = 2 * lo[k] - pos[k]
                vel[k] = -vel[k]
            elif pos[k] > hi[k]:
                pos[k] = 2 * hi[k] - pos[k]
                vel[k] = -vel[k]
    return out


def _render_video(cfg: SynthConfig, rng: np.random.Generator, class_ids: list[int]):
    """Frames (L x 3 x H x W, float32) and per-instance masks for one video."""
    h, w = cfg.resolution
    length = cfg.frames_per_video
    bg = rng.uniform(0.05, 0.25, size=3)
    frames = np.broadcast_to(bg[None, :, None, None], (length, 3, h, w)).copy()
    masks = np.zeros((len(class_ids), length, h, w), dtype=bool)
    for k, cls_idx in enumerate(class_ids):
        sc = cfg.shape_classes[cls_idx]
        r = rng.uniform(*cfg.radius)
        for t, (cx, cy) in enumerate(_trajectory(rng, length, r, h, w, cfg.motion)):
            m = rasterize(sc.geometry, cx, cy, r, h, w)
            # later instances occlude earlier ones
            masks[:k, t] &= ~m
            masks[k, t] = m
            frames[t][:, m] = np.asarray(sc.color)[:, None]
    frames += rng.normal(0.0, cfg.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    # quantize to 8 bit so in-memory frames equal the PNG round trip
    frames = (np.round(frames * 255.0) / 255.0).astype(np.float32)
    return frames, masks


def generate(cfg: SynthConfig, out_dir: str | Path | None = None) -> Dataset:
    """Build the dataset; with ``out_dir`` also write PNG frames and annotations.json."""
    cfg.validate()
    h, w = cfg.resolution
    n_cls = len(cfg.shape_classes)
    # one generator per video (seed + index) keeps videos independent
    rngs = [np.random.default_rng(cfg.seed + i) for i in range(cfg.num_videos)]
    lo, hi = cfg.instances_per_video
    counts = [int(rng.integers(lo, hi + 1)) for rng in rngs]
    offsets = np.concatenate([[0], np.cumsum(counts)])

    categories = {
        i + 1: Category(i + 1, sc.name, sc.super_category) for i, sc in enumerate(cfg.shape_classes)
    }
    videos: dict[int, VideoRecord] = {}
    annotations: dict[int, list[InstanceTrack]] = {}
    cache: dict[int, np.ndarray] = {}
    track_id = 1
    for i in range(cfg.num_videos):
        vid = i + 1
        class_ids = [int((offsets[i] + k) % n_cls) for k in range(counts[i])]
        frames, masks = _render_video(cfg, rngs[i], class_ids)
        names = tuple(f"video_{vid:04d}/{t:05d}.png" for t in range(cfg.frames_per_video))
        videos[vid] = VideoRecord(vid, h, w, names)
        annotations[vid] = []
        for k, cls_idx in enumerate(class_ids):
            annotations[vid].append(
                InstanceTrack.from_masks(cls_idx + 1, masks[k], video_id=vid, track_id=track_id)
            )
            track_id += 1
        cache[vid] = frames

    frames_root = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        frames_root = out_dir / "JPEGImages"
        _write_frames(frames_root, videos, cache)
    ds = Dataset(videos, annotations, categories, frames_root=frames_root, frame_cache=cache)
    if out_dir is not None:
        (out_dir / "annotations.json").write_text(json.dumps(dataset_to_json(ds), sort_keys=True))
    return ds


def _write_frames(root: Path, videos: dict, cache: dict) -> None:
    from PIL import Image

    for vid, rec in videos.items():
        for t, name in enumerate(rec.file_names):
            path = root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            arr = np.round(cache[vid][t].transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(path, format="PNG")
