"""Domain types, YouTube-VIS annotation I/O and mask/box helpers."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_LABEL = 0
EMPTY_BOX = (0.0, 0.0, 0.0, 0.0)


class AnnotationError(ValueError):
    """Raised for malformed or inconsistent annotation files."""


# --------------------------------------------------------------------------- #
# Masks and boxes
# --------------------------------------------------------------------------- #


def box_from_mask(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box of the nonzero pixels as normalized ``(cx, cy, w, h)``.

    Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``; coordinates are divided by
    the mask width/height. An empty mask gives ``(0, 0, 0, 0)``.
    """
    mask = np.asarray(mask)
    img_h, img_w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return EMPTY_BOX
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return (
        (x0 + x1) / 2.0 / img_w,
        (y0 + y1) / 2.0 / img_h,
        (x1 - x0) / img_w,
        (y1 - y0) / img_h,
    )


def mask_from_box(box: Sequence[float], height: int, width: int) -> np.ndarray:
    """Rasterize a normalized ``(cx, cy, w, h)`` box into a filled binary mask."""
    cx, cy, w, h = (float(v) for v in box)
    out = np.zeros((height, width), dtype=bool)
    if w <= 0 or h <= 0:
        return out
    x0 = int(np.clip(np.round((cx - w / 2) * width), 0, width))
    x1 = int(np.clip(np.round((cx + w / 2) * width), 0, width))
    y0 = int(np.clip(np.round((cy - h / 2) * height), 0, height))
    y1 = int(np.clip(np.round((cy + h / 2) * height), 0, height))
    out[y0:y1, x0:x1] = True
    return out


def boxes_from_masks(masks: np.ndarray) -> np.ndarray:
    return np.array([box_from_mask(m) for m in masks], dtype=np.float64).reshape(-1, 4)


def cxcywh_to_xywh_abs(box: Sequence[float], height: int, width: int) -> list[float]:
    cx, cy, w, h = box
    return [(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height]


# --------------------------------------------------------------------------- #
# COCO-style run-length encoding (column-major, counts start with zeros)
# --------------------------------------------------------------------------- #


def rle_encode(mask: np.ndarray, compressed: bool = False) -> dict[str, Any]:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.reshape(-1, order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    if flat.size == 0:
        counts = []
    counts = [int(c) for c in counts]
    if compressed:
        return {"size": [h, w], "counts": _counts_to_string(counts)}
    return {"size": [h, w], "counts": counts}


def rle_decode(rle: Mapping[str, Any]) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = _counts_from_string(counts.decode() if isinstance(counts, bytes) else counts)
    total = int(sum(counts))
    if total != h * w:
        raise AnnotationError(f"RLE counts sum to {total}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def _counts_to_string(counts: list[int]) -> str:
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def _counts_from_string(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# --------------------------------------------------------------------------- #
# Domain types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VideoClip:
    """M-frame RGB clip; ``frames`` is ``M x 3 x H x W`` in [0, 1].

    ``pad`` holds the (top, left) zero padding added to reach a multiple of 16
    and ``orig_size`` the unpadded (H, W).
    """

    frames: np.ndarray
    video_id: Any
    frame_indices: tuple[int, ...]
    pad: tuple[int, int] = (0, 0)
    orig_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be M x 3 x H x W, got {self.frames.shape}")
        m, _, h, w = self.frames.shape
        if m < 1:
            raise ValueError("clip needs at least one frame")
        if h % 16 or w % 16:
            raise ValueError(f"clip size {h}x{w} is not a multiple of 16")
        if len(self.frame_indices) != m:
            raise ValueError("frame_indices length differs from frame count")
        if self.orig_size is None:
            object.__setattr__(self, "orig_size", (h, w))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass(frozen=True)
class InstanceTrack:
    """Per-frame masks and normalized ``(cx, cy, w, h)`` boxes of one instance."""

    category_id: int
    masks: np.ndarray
    boxes: np.ndarray
    score: float = 1.0
    video_id: Any = None
    track_id: Any = None

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be M x h x w, got {self.masks.shape}")
        if self.boxes.shape != (self.masks.shape[0], 4):
            raise ValueError(
                f"boxes shape {self.boxes.shape} does not match {self.masks.shape[0]} frames"
            )

    @classmethod
    def from_masks(cls, category_id: int, masks: np.ndarray, **kwargs) -> "InstanceTrack":
        masks = np.asarray(masks, dtype=bool)
        return cls(category_id=category_id, masks=masks, boxes=boxes_from_masks(masks), **kwargs)

    @property
    def num_frames(self) -> int:
        return self.masks.shape[0]

    def frames(self, start: int, length: int) -> "InstanceTrack":
        sl = slice(start, start + length)
        return InstanceTrack(
            self.category_id, self.masks[sl], self.boxes[sl], self.score, self.video_id, self.track_id
        )

    def relabel(self, category_id: int) -> "InstanceTrack":
        return InstanceTrack(
            category_id, self.masks, self.boxes, self.score, self.video_id, self.track_id
        )


@dataclass(frozen=True)
class VideoRecord:
    video_id: Any
    height: int
    width: int
    file_names: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.file_names)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    super_category: str


@dataclass
class Dataset:
    """Videos, their instance tracks and the category table.

    Frames are read lazily from ``frames_root`` unless preloaded through
    ``frame_cache`` (video_id -> L x 3 x H x W array).
    """

    videos: dict[Any, VideoRecord]
    annotations: dict[Any, list[InstanceTrack]]
    categories: dict[int, Category]
    frames_root: Path | None = None
    frame_cache: dict[Any, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for vid, tracks in self.annotations.items():
            if vid not in self.videos:
                raise AnnotationError(f"annotations reference unknown video_id {vid!r}")
            for t in tracks:
                if t.category_id not in self.categories:
                    raise AnnotationError(
                        f"video {vid!r} track {t.track_id!r}: category_id {t.category_id} "
                        "is not in categories"
                    )
        for vid in self.videos:
            self.annotations.setdefault(vid, [])

    @property
    def video_ids(self) -> list:
        return list(self.videos)

    def tracks(self, video_id) -> list[InstanceTrack]:
        return self.annotations.get(video_id, [])

    def num_instances(self) -> int:
        return sum(len(v) for v in self.annotations.values())

    def frames(self, video_id) -> np.ndarray:
        if video_id not in self.frame_cache:
            self.frame_cache[video_id] = self._read_frames(self.videos[video_id])
        return self.frame_cache[video_id]

    def _read_frames(self, rec: VideoRecord) -> np.ndarray:
        from PIL import Image

        if self.frames_root is None:
            raise FileNotFoundError(f"no frames_root configured for video {rec.video_id!r}")
        out = np.empty((rec.length, 3, rec.height, rec.width), dtype=np.float32)
        for i, name in enumerate(rec.file_names):
            with Image.open(Path(self.frames_root) / name) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            out[i] = arr.transpose(2, 0, 1)
        return out

    def clip(self, video_id, start: int = 0, length: int | None = None, multiple: int = 16) -> VideoClip:
        """Slice ``length`` frames and center-pad H, W with zeros up to ``multiple``."""
        frames = self.frames(video_id)
        if length is None:
            length = frames.shape[0] - start
        sel = frames[start : start + length]
        if sel.shape[0] != length:
            raise ValueError(f"video {video_id!r} has no frames {start}..{start + length - 1}")
        padded, pad = pad_to_multiple(sel, multiple)
        return VideoClip(
            frames=padded,
            video_id=video_id,
            frame_indices=tuple(range(start, start + length)),
            pad=pad,
            orig_size=sel.shape[2:],
        )

    def subset(self, video_ids: Iterable) -> "Dataset":
        ids = list(video_ids)
        return Dataset(
            videos={v: self.videos[v] for v in ids},
            annotations={v: list(self.annotations.get(v, [])) for v in ids},
            categories=dict(self.categories),
            frames_root=self.frames_root,
            frame_cache=self.frame_cache,
        )


@dataclass(frozen=True)
class ClassRegistry:
    """Known category ids in learning order; index 0 of the classifier is unknown."""

    known_ids: tuple[int, ...]
    unknown_label: int = UNKNOWN_LABEL

    def __post_init__(self):
        object.__setattr__(self, "known_ids", tuple(int(k) for k in self.known_ids))
        if self.unknown_label in self.known_ids:
            raise ValueError("label 0 is reserved for unknown")
        if len(set(self.known_ids)) != len(self.known_ids):
            raise ValueError("duplicate known ids")

    @property
    def num_known(self) -> int:
        return len(self.known_ids)

    def class_index(self, category_id: int) -> int:
        """Classifier column for a category (unknown -> 0)."""
        if category_id == self.unknown_label:
            return 0
        return self.known_ids.index(category_id) + 1

    def category_of(self, class_index: int) -> int:
        return self.unknown_label if class_index == 0 else self.known_ids[class_index - 1]

    def extend(self, new_ids: Iterable[int]) -> "ClassRegistry":
        add = [int(c) for c in new_ids if int(c) not in self.known_ids]
        return ClassRegistry(self.known_ids + tuple(add))

    def covers(self, other: "ClassRegistry") -> bool:
        return set(other.known_ids) <= set(self.known_ids)


def pad_to_multiple(frames: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = frames.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return frames, (0, 0)
    top, left = ph // 2, pw // 2
    out = np.zeros(frames.shape[:-2] + (h + ph, w + pw), dtype=frames.dtype)
    out[..., top : top + h, left : left + w] = frames
    return out, (top, left)


# --------------------------------------------------------------------------- #
# Annotation file I/O
# --------------------------------------------------------------------------- #


def _require(obj: Mapping, key: str, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise AnnotationError(f"missing key {key!r} in {where}")
    return obj[key]


def parse_annotations(data: Mapping[str, Any], frames_root: Path | None = None) -> Dataset:
    for key in ("videos", "annotations", "categories"):
        _require(data, key, "annotation file")

    categories: dict[int, Category] = {}
    for c in data["categories"]:
        cid = int(_require(c, "id", "category"))
        categories[cid] = Category(cid, str(c.get("name", cid)), str(c.get("supercategory", "")))

    videos: dict[Any, VideoRecord] = {}
    for v in data["videos"]:
        vid = _require(v, "id", "video")
        names = tuple(_require(v, "file_names", f"video {vid!r}"))
        videos[vid] = VideoRecord(
            vid,
            int(_require(v, "height", f"video {vid!r}")),
            int(_require(v, "width", f"video {vid!r}")),
            names,
        )

    annotations: dict[Any, list[InstanceTrack]] = {vid: [] for vid in videos}
    for a in data["annotations"]:
        aid = a.get("id") if isinstance(a, Mapping) else None
        where = f"annotation {aid!r}"
        vid = _require(a, "video_id", where)
        cid = int(_require(a, "category_id", where))
        segs = _require(a, "segmentations", where)
        if vid not in videos:
            raise AnnotationError(f"{where}: video_id {vid!r} not in videos")
        if cid not in categories:
            raise AnnotationError(f"{where} (video {vid!r}): category_id {cid} not in categories")
        rec = videos[vid]
        bboxes = a.get("bboxes")
        if bboxes is not None and len(bboxes) != len(segs):
            raise AnnotationError(
                f"video {vid!r} instance {aid!r}: {len(bboxes)} boxes vs {len(segs)} masks"
            )
        if len(segs) != rec.length:
            raise AnnotationError(
                f"video {vid!r} instance {aid!r}: {len(segs)} frames vs video length {rec.length}"
            )
        decoded = [None if seg is None else rle_decode(seg) for seg in segs]
        shapes = {m.shape for m in decoded if m is not None}
        if len(shapes) > 1:
            raise AnnotationError(f"video {vid!r} instance {aid!r}: mixed mask sizes {shapes}")
        h, w = shapes.pop() if shapes else (rec.height, rec.width)
        masks = np.zeros((len(segs), h, w), dtype=bool)
        for i, m in enumerate(decoded):
            if m is not None:
                masks[i] = m
        annotations[vid].append(
            InstanceTrack.from_masks(cid, masks, video_id=vid, track_id=aid)
        )

    return Dataset(videos, annotations, categories, frames_root=frames_root)


def load_annotations(path: str | Path, frames_root: str | Path | None = None) -> Dataset:
    """Read a YouTube-VIS style JSON file.

    Boxes are recomputed from the decoded masks so the tight-box invariant
    holds exactly; ``bboxes`` in the file only take part in the frame-count
    check. ``null`` segmentations become all-zero masks with box (0,0,0,0).
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    if frames_root is None:
        frames_root = path.parent / "JPEGImages"
    return parse_annotations(data, Path(frames_root))


def dataset_to_json(dataset: Dataset) -> dict[str, Any]:
    videos = [
        {
            "id": rec.video_id,
            "height": rec.height,
            "width": rec.width,
            "length": rec.length,
            "file_names": list(rec.file_names),
        }
        for rec in dataset.videos.values()
    ]
    anns = []
    next_id = 1
    for vid, tracks in dataset.annotations.items():
        for t in tracks:
            h, w = t.masks.shape[1:]
            segs, boxes, areas = [], [], []
            for m, b in zip(t.masks, t.boxes):
                if m.any():
                    segs.append(rle_encode(m))
                    boxes.append(cxcywh_to_xywh_abs(b, h, w))
                    areas.append(int(m.sum()))
                else:
                    segs.append(None)
                    boxes.append(None)
                    areas.append(None)
            anns.append(
                {
                    "id": t.track_id if t.track_id is not None else next_id,
                    "video_id": vid,
                    "category_id": int(t.category_id),
                    "segmentations": segs,
                    "bboxes": boxes,
                    "areas": areas,
                    "iscrowd": 0,
                    "height": h,
                    "width": w,
                    "length": 1,
                }
            )
            next_id += 1
    cats = [
        {"id": c.id, "name": c.name, "supercategory": c.super_category}
        for c in dataset.categories.values()
    ]
    return {"info": {}, "licenses": [], "videos": videos, "annotations": anns, "categories": cats}


def save_annotations(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(dataset), sort_keys=True))
