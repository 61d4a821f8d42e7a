"""Spatio-temporal mask AP / AR-1 and the known/unknown report layout."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data_model import UNKNOWN_LABEL, ClassRegistry, Dataset, InstanceTrack, rle_decode, rle_encode

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = tuple(i / 100 for i in range(101))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_dets_ap: int = 100
    max_dets_ar: int = 1

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(not 0 < x < 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing in (0, 1): {t}")
        if self.max_dets_ap < 1 or self.max_dets_ar < 1:
            raise ValueError("detection limits must be positive")


@dataclass(frozen=True)
class Detection:
    """A scored mask track; ``masks`` is T x h x w at annotation resolution."""

    video_id: Any
    category_id: int
    score: float
    masks: np.ndarray


def _as_masks(x) -> np.ndarray:
    return np.asarray(x.masks if hasattr(x, "masks") else x).astype(bool)


def _resize_nearest(masks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = masks.shape[-2:]
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return masks[:, rows][:, :, cols]


def st_iou(pred, gt) -> float:
    """Summed per-frame intersection over summed per-frame union.

    Predictions at another resolution are resized (nearest) to the ground
    truth. Two tracks that are empty on every frame have IoU 0.
    """
    p = _as_masks(pred)
    g = _as_masks(gt)
    if p.shape[0] != g.shape[0]:
        raise ValueError(f"frame count mismatch: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[1:] != g.shape[1:]:
        p = _resize_nearest(p, g.shape[1:])
    inter = int(np.logical_and(p, g).sum())
    union = int(np.logical_or(p, g).sum())
    return inter / union if union else 0.0


# --------------------------------------------------------------------------- #
# Single-class routine
# --------------------------------------------------------------------------- #


@dataclass
class ClassMetrics:
    ap_per_threshold: list[float]
    ar1_per_threshold: list[float]
    num_gt: int
    num_pred: int

    @property
    def ap(self) -> float:
        return math.fsum(self.ap_per_threshold) / len(self.ap_per_threshold)

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0]

    @property
    def ar1(self) -> float:
        return math.fsum(self.ar1_per_threshold) / len(self.ar1_per_threshold)

    def summary(self) -> dict[str, float]:
        return {"AP": self.ap, "AP50": self.ap50, "AR1": self.ar1, "num_gt": self.num_gt, "num_pred": self.num_pred}


def _top_per_video(dets: Sequence[Detection], limit: int) -> list[Detection]:
    """Keep the ``limit`` best detections of each video; stable on ties."""
    by_video: dict[Any, list[int]] = {}
    for i, d in enumerate(dets):
        by_video.setdefault(d.video_id, []).append(i)
    keep = []
    for idx in by_video.values():
        keep.extend(sorted(idx, key=lambda i: -dets[i].score)[:limit])
    return [dets[i] for i in sorted(keep)]


def _greedy_match(dets: Sequence[Detection], ious: dict[tuple[int, int], float], gt_video: Sequence, thr: float) -> list[bool]:
    """Score-descending greedy assignment; each detection takes the unmatched
    gt of its video with the highest IoU >= thr. Returns TP flags in score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gt_video)
    flags = []
    for i in order:
        best, best_iou = -1, thr
        for j, vid in enumerate(gt_video):
            if taken[j] or vid != dets[i].video_id:
                continue
            iou = ious[(i, j)]
            if iou >= best_iou:
                if best < 0 or iou > best_iou:
                    best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from TP flags in score order."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = fp = 0
    recall, precision = [], []
    for f in tp_flags:
        tp += f
        fp += not f
        recall.append(tp / num_gt)
        precision.append(tp / (tp + fp))
    # precision envelope: best precision at this recall or beyond
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = []
    k = 0
    for r in RECALL_POINTS:
        while k < len(recall) and recall[k] < r:
            k += 1
        total.append(precision[k] if k < len(recall) else 0.0)
    return math.fsum(total) / len(RECALL_POINTS)


def evaluate_class(dets: Sequence[Detection], gts: Sequence[tuple[Any, np.ndarray]], config: EvalConfig = EvalConfig()) -> ClassMetrics:
    """AP and AR-1 over IoU thresholds for one class.

    ``gts`` holds ``(video_id, masks)`` pairs.
    """
    gt_video = [v for v, _ in gts]
    n_gt = len(gts)

    def iou_table(sel):
        return {
            (i, j): st_iou(d.masks, gts[j][1])
            for i, d in enumerate(sel)
            for j in range(n_gt)
            if gt_video[j] == d.video_id
        }

    ap_dets = _top_per_video(dets, config.max_dets_ap)
    ar_dets = _top_per_video(dets, config.max_dets_ar)
    ap_ious = iou_table(ap_dets)
    ar_ious = iou_table(ar_dets)
    aps, ars = [], []
    for thr in config.iou_thresholds:
        if n_gt == 0:
            aps.append(0.0)
            ars.append(0.0)
            continue
        aps.append(interpolated_ap(_greedy_match(ap_dets, ap_ious, gt_video, thr), n_gt))
        ars.append(sum(_greedy_match(ar_dets, ar_ious, gt_video, thr)) / n_gt)
    return ClassMetrics(aps, ars, n_gt, len(dets))


# --------------------------------------------------------------------------- #
# Known / unknown evaluation
# --------------------------------------------------------------------------- #


@dataclass
class KnownMetrics:
    per_class: dict[int, ClassMetrics]

    def _evaluated(self, ids: Iterable[int] | None = None) -> list[ClassMetrics]:
        ids = self.per_class if ids is None else ids
        return [self.per_class[c] for c in ids if c in self.per_class and self.per_class[c].num_gt > 0]

    def mean(self, attr: str, ids: Iterable[int] | None = None) -> float:
        vals = [getattr(m, attr) for m in self._evaluated(ids)]
        return math.fsum(vals) / len(vals) if vals else 0.0

    @property
    def mean_ap(self) -> float:
        return self.mean("ap")

    @property
    def mean_ap50(self) -> float:
        return self.mean("ap50")

    @property
    def ar1(self) -> float:
        return self.mean("ar1")


def known_ground_truth(dataset: Dataset, video_ids: Sequence, registry: ClassRegistry) -> list[InstanceTrack]:
    return [t for v in video_ids for t in dataset.tracks(v) if t.category_id in registry.known_ids]


def unknown_ground_truth(dataset: Dataset, video_ids: Sequence, registry: ClassRegistry) -> list[InstanceTrack]:
    """Tracks of not-yet-known categories, relabeled to the unknown class."""
    return [
        t.relabel(UNKNOWN_LABEL)
        for v in video_ids
        for t in dataset.tracks(v)
        if t.category_id not in registry.known_ids
    ]


def _det(p) -> Detection:
    return p if isinstance(p, Detection) else Detection(p.video_id, int(p.category_id), float(p.score), np.asarray(p.masks))


def evaluate_known(preds: Sequence, gts: Sequence[InstanceTrack], registry: ClassRegistry, config: EvalConfig = EvalConfig()) -> KnownMetrics:
    """Per known class AP / AR-1. Predictions of other categories are ignored."""
    dets = [_det(p) for p in preds]
    per_class = {}
    for cid in registry.known_ids:
        c_dets = [d for d in dets if d.category_id == cid]
        c_gts = [(t.video_id, np.asarray(t.masks)) for t in gts if t.category_id == cid]
        per_class[cid] = evaluate_class(c_dets, c_gts, config)
    return KnownMetrics(per_class)


def evaluate_unknown(preds_unknown: Sequence, gts_future: Sequence[InstanceTrack], config: EvalConfig = EvalConfig()) -> ClassMetrics:
    """Class-agnostic evaluation of unknown predictions against future-class tracks."""
    dets = [_det(p) for p in preds_unknown if p.category_id == UNKNOWN_LABEL]
    c_gts = [(t.video_id, np.asarray(t.masks)) for t in gts_future]
    return evaluate_class(dets, c_gts, config)


# --------------------------------------------------------------------------- #
# Baselines
# --------------------------------------------------------------------------- #


def random_proposals(dataset: Dataset, video_ids: Sequence, per_video: int, seed: int) -> list[Detection]:
    """Static random boxes with random scores, labeled unknown."""
    rng = np.random.default_rng(seed)
    out = []
    for vid in video_ids:
        rec = dataset.videos[vid]
        for _ in range(per_video):
            w, h = rng.uniform(0.1, 0.5, size=2)
            x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            m = np.zeros((rec.length, rec.height, rec.width), dtype=bool)
            r0, r1 = int(y0 * rec.height), int(math.ceil((y0 + h) * rec.height))
            c0, c1 = int(x0 * rec.width), int(math.ceil((x0 + w) * rec.width))
            m[:, r0:r1, c0:c1] = True
            out.append(Detection(vid, UNKNOWN_LABEL, float(rng.uniform()), m))
    return out


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #


@dataclass
class SectionMetrics:
    name: str
    ap: float
    ap50: float
    ar1: float
    classes: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    task_id: int
    sections: list[SectionMetrics]
    per_class: dict[int, dict[str, float]]
    fingerprint: str = ""
    extras: dict[str, Any] = field(default_factory=dict)

    def section(self, name: str) -> SectionMetrics:
        for s in self.sections:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def column_names(self) -> list[str]:
        return [s.name for s in self.sections]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "fingerprint": self.fingerprint,
            "sections": [asdict(s) for s in self.sections],
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "extras": self.extras,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def table(self) -> str:
        """Plain-text table, metrics x100, one column group per section."""
        head1 = "".join(f"| {s.name:^22} " for s in self.sections) + "|"
        head2 = "".join(f"| {'AP':>6} {'AP50':>6} {'AR1':>6} " for _ in self.sections) + "|"
        row = "".join(f"| {100 * s.ap:6.1f} {100 * s.ap50:6.1f} {100 * s.ar1:6.1f} " for s in self.sections) + "|"
        return "\n".join([f"Task {self.task_id}", head1, head2, row])


def build_report(
    task_id: int,
    known: KnownMetrics,
    unknown: ClassMetrics | None,
    registry_history: Sequence[ClassRegistry],
    fingerprint: str = "",
) -> EvalReport:
    """Task 1: Known and Unknown. Task 2: Previously Known, Current Known, Both."""

    def section(name, ids):
        ids = list(ids)
        return SectionMetrics(name, known.mean("ap", ids), known.mean("ap50", ids), known.mean("ar1", ids), ids)

    current = registry_history[task_id - 1]
    if task_id == 1:
        sections = [section("Known", current.known_ids)]
        u = unknown if unknown is not None else ClassMetrics([0.0], [0.0], 0, 0)
        sections.append(SectionMetrics("Unknown", u.ap, u.ap50, u.ar1, [UNKNOWN_LABEL]))
    else:
        prev = set(registry_history[task_id - 2].known_ids)
        sections = [
            section("Previously Known", [c for c in current.known_ids if c in prev]),
            section("Current Known", [c for c in current.known_ids if c not in prev]),
            section("Both", current.known_ids),
        ]
        if unknown is not None:
            sections.append(SectionMetrics("Unknown", unknown.ap, unknown.ap50, unknown.ar1, [UNKNOWN_LABEL]))
    per_class = {c: m.summary() for c, m in known.per_class.items()}
    return EvalReport(task_id, sections, per_class, fingerprint)


# --------------------------------------------------------------------------- #
# Prediction files
# --------------------------------------------------------------------------- #


def predictions_to_json(preds: Sequence) -> list[dict]:
    return [
        {
            "video_id": p.video_id,
            "category_id": int(p.category_id),
            "score": float(p.score),
            "segmentations": [rle_encode(np.asarray(m)) for m in p.masks],
        }
        for p in preds
    ]


def predictions_from_json(data: Sequence[Mapping]) -> list[Detection]:
    out = []
    for d in data:
        masks = np.stack([rle_decode(s).astype(bool) for s in d["segmentations"]])
        out.append(Detection(d["video_id"], int(d["category_id"]), float(d["score"]), masks))
    return out


def save_predictions(preds: Sequence, path: str | Path, fingerprint: str = "") -> None:
    doc = {"fingerprint": fingerprint, "predictions": predictions_to_json(preds)}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_predictions(path: str | Path, expected_fingerprint: str | None = None) -> list[Detection]:
    """Read a prediction file; a bare list of entries is accepted too.

    With ``expected_fingerprint`` set, a file stamped with another config
    fingerprint is refused.
    """
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        return predictions_from_json(doc)
    stamp = doc.get("fingerprint", "")
    if expected_fingerprint is not None and stamp and stamp != expected_fingerprint:
        raise ValueError(f"{path}: predictions come from config {stamp[:12]}, not {expected_fingerprint[:12]}")
    return predictions_from_json(doc["predictions"])


def ground_truth_predictions(dataset: Dataset, video_ids: Sequence, registry: ClassRegistry) -> list[Detection]:
    """Ground truth rewritten as perfect predictions (unknown tracks as category 0)."""
    out = []
    for v in video_ids:
        for t in dataset.tracks(v):
            cat = t.category_id if t.category_id in registry.known_ids else UNKNOWN_LABEL
            out.append(Detection(v, cat, 1.0, np.asarray(t.masks).astype(bool)))
    return out
