"""Two-task open-world lifecycle: task training, exemplar replay and
known/unknown inference selection."""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .data_model import ClassRegistry, Dataset, InstanceTrack, VideoClip, pad_to_multiple, rle_decode, rle_encode
from .matching_losses import LossConfig, NonFiniteLossError, Targets, clip_loss, masks_to_annotation_resolution
from .model import OWVISModel

logger = logging.getLogger(__name__)

LOSS_KEYS = ("L_c", "L_f", "L_r_box", "L_r_mask", "L_contr")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, component: str, checkpoint: Path | None):
        self.step = step
        self.component = component
        self.checkpoint = checkpoint
        where = f"; last finite state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite {component} at step {step}{where}")


@dataclass
class TrainSchedule:
    task1_epochs: int = 18
    task2_epochs: int = 12
    finetune_epochs: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    clip_length: int = 5
    grad_clip: float = 0.1
    seed: int = 0
    augment: bool = True
    max_shift: float = 0.0  # translation augmentation, fraction of frame size
    max_steps: int | None = None  # stop a phase early (smoke runs, fixed-step experiments)

    def validate(self) -> None:
        for name in ("task1_epochs", "task2_epochs", "finetune_epochs", "clip_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.max_shift < 1.0:
            raise ValueError(f"max_shift must be in [0, 1), got {self.max_shift}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClipRef:
    """A training sample: ``length`` frames of a video from ``start``."""

    video_id: Any
    start: int
    length: int
    aug: int = 0  # dihedral transform code, 0 = identity
    shift: tuple[int, int] = (0, 0)  # (dy, dx) translation in pixels


# --------------------------------------------------------------------------- #
# Sampling and targets
# --------------------------------------------------------------------------- #


def sample_clips(
    dataset: Dataset,
    video_ids: Sequence,
    length: int,
    seed: int,
    epoch: int,
    augment: bool = False,
    max_shift: float = 0.0,
) -> list[ClipRef]:
    """Seeded video order, clip start and (optionally) flip/transpose and
    translation for one epoch."""
    rng = random.Random(f"{seed}:{epoch}")
    order = list(video_ids)
    rng.shuffle(order)
    out = []
    for vid in order:
        n = dataset.videos[vid].length
        m = min(length, n)
        start = rng.randrange(n - m + 1)
        out.append(ClipRef(vid, start, m, *random_augmentation(rng, _frame_size(dataset, vid), augment, max_shift)))
    return out


def random_augmentation(rng: random.Random, size: tuple[int, int], augment: bool, max_shift: float) -> tuple[int, tuple[int, int]]:
    """Dihedral code and (dy, dx) shift; identity when ``augment`` is off."""
    if not augment:
        return 0, (0, 0)
    code = rng.randrange(8)
    sy, sx = int(max_shift * size[0]), int(max_shift * size[1])
    return code, (rng.randint(-sy, sy), rng.randint(-sx, sx))


def _frame_size(dataset: Dataset, video_id) -> tuple[int, int]:
    rec = dataset.videos[video_id]
    return rec.height, rec.width


def dihedral(x: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 flips/transposes to the last two axes."""
    if code & 4:
        x = np.swapaxes(x, -1, -2)
    if code & 2:
        x = x[..., ::-1, :]
    if code & 1:
        x = x[..., ::-1]
    return np.ascontiguousarray(x)


def translate(x: np.ndarray, dy: int, dx: int, fill: np.ndarray | float = 0) -> np.ndarray:
    """Shift the last two axes by (dy, dx); uncovered pixels take ``fill``
    (broadcast against ``x[..., :1, :1]``)."""
    out = np.empty_like(x)
    out[...] = fill
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y, dst_y = slice(max(-dy, 0), h - max(dy, 0)), slice(max(dy, 0), h - max(-dy, 0))
    src_x, dst_x = slice(max(-dx, 0), w - max(dx, 0)), slice(max(dx, 0), w - max(-dx, 0))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


def load_sample(dataset: Dataset, ref: ClipRef, registry: ClassRegistry, multiple: int = 32) -> tuple[VideoClip, list[InstanceTrack]]:
    """Frames and known-class tracks of a clip, transformed by ``ref.aug`` and
    ``ref.shift`` and padded. Pixels uncovered by the shift take the median
    colour of each frame; tracks shifted out of view are dropped."""
    frames = dataset.frames(ref.video_id)[ref.start : ref.start + ref.length]
    tracks = clip_tracks(dataset.tracks(ref.video_id), ref, registry)
    dy, dx = ref.shift
    if ref.aug or dy or dx:
        fill = np.median(frames, axis=(-2, -1), keepdims=True)
        frames = translate(dihedral(frames, ref.aug), dy, dx, fill)
        moved = (translate(dihedral(t.masks, ref.aug), dy, dx, False) for t in tracks)
        tracks = [
            InstanceTrack.from_masks(t.category_id, m, video_id=t.video_id, track_id=t.track_id)
            for t, m in zip(tracks, moved)
            if m.any()
        ]
    padded, pad = pad_to_multiple(frames, multiple)
    clip = VideoClip(padded, ref.video_id, tuple(range(ref.start, ref.start + ref.length)), pad, frames.shape[2:])
    return clip, tracks


def clip_tracks(tracks: Iterable[InstanceTrack], ref: ClipRef, registry: ClassRegistry) -> list[InstanceTrack]:
    """Tracks of known categories cut to the clip; instances absent from every
    frame of the clip are dropped."""
    out = []
    for t in tracks:
        if t.category_id not in registry.known_ids:
            continue
        cut = t.frames(ref.start, ref.length)
        if np.asarray(cut.masks).any():
            out.append(cut)
    return out


def _to_tensor(frames: np.ndarray, dtype: torch.dtype) -> Tensor:
    return torch.as_tensor(np.ascontiguousarray(frames)).to(dtype)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.records]

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _param_dtype(model: OWVISModel) -> torch.dtype:
    return next(model.parameters()).dtype


def run_phase(
    model: OWVISModel,
    samples: Callable[[int], list[tuple[ClipRef, Dataset, ClassRegistry]]],
    epochs: int,
    schedule: TrainSchedule,
    loss_cfg: LossConfig,
    phase: str,
    log: TrainLog,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[int, Any], None] | None = None,
) -> TrainLog:
    """Optimize the full loss over the clips that ``samples(epoch)`` yields."""
    dtype = _param_dtype(model)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=schedule.learning_rate, weight_decay=schedule.weight_decay, foreach=True)
    model.train()
    step = 0
    last_finite = None
    for epoch in range(epochs):
        for ref, ds, registry in samples(epoch):
            if schedule.max_steps is not None and step >= schedule.max_steps:
                return log
            clip, tracks = load_sample(ds, ref, registry)
            targets = Targets.from_tracks(tracks, registry, clip, dtype=dtype)
            try:
                out = model(_to_tensor(clip.frames, dtype))
                res = clip_loss(out, targets, loss_cfg)
            except NonFiniteLossError as err:
                path = None
                if checkpoint_path is not None and last_finite is not None:
                    path = Path(checkpoint_path)
                    snapshot = copy.deepcopy(model)
                    snapshot.load_state_dict(last_finite)
                    save_checkpoint(path, snapshot, extra={"phase": phase, "step": step})
                raise TrainingDivergedError(step, err.component, path) from err
            last_finite = {k: v.detach().clone() for k, v in model.state_dict().items()}
            opt.zero_grad(set_to_none=True)
            res.total.backward()
            if schedule.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
            opt.step()
            rec = {"phase": phase, "step": step, "epoch": epoch, "video_id": ref.video_id, "start": ref.start}
            rec.update(res.bundle.as_dict())
            rec["total"] = float(res.total.detach())
            log.records.append(rec)
            if on_step is not None:
                on_step(step, res)
            step += 1
    return log


def train_task(
    model: OWVISModel,
    dataset: Dataset,
    video_ids: Sequence,
    schedule: TrainSchedule,
    loss_cfg: LossConfig = LossConfig(),
    epochs: int | None = None,
    log: TrainLog | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[int, Any], None] | None = None,
) -> TrainLog:
    """Train on clips of ``video_ids`` with the model's current registry.

    Only categories in the registry are supervised; everything else in the
    frames is left for the pseudo-unknown mechanism.
    """
    schedule.validate()
    if not video_ids:
        raise ValueError("no training videos")
    registry = model.registry
    if model.heads.num_classes != registry.num_known + 1:
        raise ValueError("registry does not match the classifier width")
    epochs = schedule.task1_epochs if epochs is None else epochs
    log = TrainLog() if log is None else log

    def samples(epoch):
        refs = sample_clips(dataset, video_ids, schedule.clip_length, schedule.seed, epoch, schedule.augment, schedule.max_shift)
        return [(r, dataset, registry) for r in refs]

    return run_phase(model, samples, epochs, schedule, loss_cfg, "task", log, checkpoint_path, on_step)


# --------------------------------------------------------------------------- #
# Exemplars
# --------------------------------------------------------------------------- #


@dataclass
class ExemplarStore:
    """Per known category, up to ``e`` clips with their known-class tracks."""

    e: int
    seed: int
    registry: ClassRegistry
    entries: dict[int, list[ClipRef]]
    tracks: dict[ClipRef, list[InstanceTrack]]

    def clips(self) -> list[ClipRef]:
        """Distinct clips across all entries, in first-appearance order."""
        seen: dict[ClipRef, None] = {}
        for cid in self.registry.known_ids:
            for ref in self.entries.get(cid, []):
                seen.setdefault(ref, None)
        return list(seen)

    def __len__(self) -> int:
        return len(self.clips())

    def to_json(self) -> dict:
        clips = self.clips()
        index = {ref: i for i, ref in enumerate(clips)}
        annotations = []
        for ref in clips:
            for t in self.tracks[ref]:
                annotations.append({
                    "clip": index[ref],
                    "category_id": t.category_id,
                    "track_id": t.track_id,
                    "segmentations": [rle_encode(np.asarray(m)) for m in t.masks],
                })
        return {
            "e": self.e,
            "seed": self.seed,
            "known_ids": list(self.registry.known_ids),
            "clips": [{"video_id": r.video_id, "start": r.start, "length": r.length} for r in clips],
            "entries": {str(c): [index[r] for r in refs] for c, refs in self.entries.items()},
            "annotations": annotations,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExemplarStore":
        clips = [ClipRef(c["video_id"], c["start"], c["length"]) for c in data["clips"]]
        tracks: dict[ClipRef, list[InstanceTrack]] = {r: [] for r in clips}
        for a in data["annotations"]:
            ref = clips[a["clip"]]
            masks = np.stack([rle_decode(s) for s in a["segmentations"]])
            tracks[ref].append(
                InstanceTrack.from_masks(a["category_id"], masks, video_id=ref.video_id, track_id=a["track_id"])
            )
        return cls(
            e=data["e"],
            seed=data["seed"],
            registry=ClassRegistry(tuple(data["known_ids"])),
            entries={int(c): [clips[i] for i in idx] for c, idx in data["entries"].items()},
            tracks=tracks,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ExemplarStore":
        return cls.from_json(json.loads(Path(path).read_text()))

    def as_dataset(self, source: Dataset) -> Dataset:
        """Source videos restricted to exemplar videos, with store annotations."""
        clips = self.clips()
        vids = list(dict.fromkeys(r.video_id for r in clips))
        missing = [v for v in vids if v not in source.videos]
        if missing:
            raise KeyError(f"exemplar videos {missing} are not in the dataset")
        ds = source.subset(vids)
        # annotations are full-length tracks so that ClipRef slicing applies
        for vid in vids:
            ds.annotations[vid] = [
                t for t in source.tracks(vid) if t.category_id in self.registry.known_ids
            ]
        return ds


def select_exemplars(
    dataset: Dataset,
    video_ids: Sequence,
    registry: ClassRegistry,
    e: int,
    seed: int,
    clip_length: int,
) -> ExemplarStore:
    """Seeded uniform sample of up to ``e`` clips per known category.

    A clip is a candidate for every known category visible in it; each
    category draws its own sample, so one clip may fill several entries.
    """
    if e < 1:
        raise ValueError(f"e must be >= 1, got {e}")
    rng = random.Random(seed)
    refs = []
    for vid in video_ids:
        n = dataset.videos[vid].length
        m = min(clip_length, n)
        refs.append(ClipRef(vid, rng.randrange(n - m + 1), m))
    tracks = {r: clip_tracks(dataset.tracks(r.video_id), r, registry) for r in refs}
    entries: dict[int, list[ClipRef]] = {}
    for cid in registry.known_ids:
        candidates = [r for r in refs if any(t.category_id == cid for t in tracks[r])]
        if not candidates:
            logger.warning("no clips available for category %d; exemplar entry left empty", cid)
            entries[cid] = []
            continue
        if len(candidates) < e:
            logger.warning("category %d has only %d clips for e=%d", cid, len(candidates), e)
        entries[cid] = rng.sample(candidates, min(e, len(candidates)))
    used = {r for refs_ in entries.values() for r in refs_}
    return ExemplarStore(e, seed, registry, entries, {r: tracks[r] for r in refs if r in used})


# --------------------------------------------------------------------------- #
# Incremental step
# --------------------------------------------------------------------------- #


def incremental_step(
    model: OWVISModel,
    registry_new: ClassRegistry,
    dataset: Dataset,
    video_ids: Sequence,
    exemplars: ExemplarStore | None,
    schedule: TrainSchedule,
    loss_cfg: LossConfig = LossConfig(),
    finetune: bool = True,
    log: TrainLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainLog:
    """Extend the classifier, train on the new task, then finetune with replay.

    The finetune phase sees the Task-2 clips plus every exemplar clip; the
    exemplar clips are supervised only with the classes known when they
    were stored.
    """
    schedule.validate()
    old = model.registry
    if not (registry_new.covers(old) and registry_new.num_known > old.num_known):
        raise ValueError("incremental step needs a strictly larger registry")
    model.extend_registry(registry_new)
    log = TrainLog() if log is None else log

    def task_samples(epoch):
        refs = sample_clips(dataset, video_ids, schedule.clip_length, schedule.seed, epoch, schedule.augment, schedule.max_shift)
        return [(r, dataset, registry_new) for r in refs]

    run_phase(model, task_samples, schedule.task2_epochs, schedule, loss_cfg, "task2", log, checkpoint_path)
    if not finetune or exemplars is None or len(exemplars) == 0:
        return log

    ex_ds = exemplars.as_dataset(dataset)
    ex_refs = exemplars.clips()

    def finetune_samples(epoch):
        refs = sample_clips(dataset, video_ids, schedule.clip_length, schedule.seed + 1, epoch, schedule.augment, schedule.max_shift)
        items = [(r, dataset, registry_new) for r in refs]
        rng = random.Random(f"{schedule.seed}:ex:{epoch}")
        items += [
            (
                ClipRef(r.video_id, r.start, r.length, *random_augmentation(rng, _frame_size(ex_ds, r.video_id), schedule.augment, schedule.max_shift)),
                ex_ds,
                exemplars.registry,
            )
            for r in ex_refs
        ]
        random.Random(f"{schedule.seed}:ft:{epoch}").shuffle(items)
        return items

    run_phase(model, finetune_samples, schedule.finetune_epochs, schedule, loss_cfg, "finetune", log, checkpoint_path)
    return log


# --------------------------------------------------------------------------- #
# Inference
# --------------------------------------------------------------------------- #


def class_probabilities(class_logits: Tensor, activation: str = "sigmoid") -> Tensor:
    if activation == "sigmoid":
        return class_logits.sigmoid()
    if activation == "softmax":
        return class_logits.softmax(dim=-1)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Selection:
    query: int
    class_index: int  # 0 for unknown
    score: float


def inference_select(probs: Tensor | np.ndarray, k: int, tau: float = 0.05) -> tuple[list[Selection], list[Selection]]:
    """Top-``k`` known queries by best known-class probability, then top-``k``
    of the rest by unknown probability (column 0). Scores below ``tau`` are
    dropped. Ties go to the lower query index."""
    p = np.asarray(probs.detach().cpu() if isinstance(probs, Tensor) else probs, dtype=np.float64)
    q, c1 = p.shape
    if c1 < 2:
        raise ValueError("need at least one known class column")
    k = min(k, q)
    known_best = p[:, 1:].max(axis=1)
    known_cls = p[:, 1:].argmax(axis=1) + 1
    order = sorted(range(q), key=lambda i: (-known_best[i], i))
    known_q = order[:k]
    rest = order[k:]
    k_u = k
    if 2 * k > q:
        logger.warning("2k=%d exceeds %d queries; unknown set clamped to %d", 2 * k, q, q - k)
        k_u = q - k
    unknown_q = sorted(rest, key=lambda i: (-p[i, 0], i))[:k_u]
    known = [Selection(i, int(known_cls[i]), float(known_best[i])) for i in known_q if known_best[i] >= tau]
    unknown = [Selection(i, 0, float(p[i, 0])) for i in unknown_q if p[i, 0] >= tau]
    return known, unknown


@dataclass(frozen=True)
class Prediction:
    video_id: Any
    category_id: int  # 0 = unknown
    score: float
    masks: np.ndarray  # T x h x w bool at annotation resolution


@torch.no_grad()
def predict_video(
    model: OWVISModel,
    dataset: Dataset,
    video_id,
    k: int,
    tau: float = 0.05,
    activation: str = "sigmoid",
) -> list[Prediction]:
    """Run the whole video as one clip and return selected tracks."""
    was_training = model.training
    model.eval()
    dtype = _param_dtype(model)
    clip = dataset.clip(video_id, multiple=32)
    out = model(_to_tensor(clip.frames, dtype))
    probs = class_probabilities(out["branch"].class_logits, activation)
    known, unknown = inference_select(probs, k, tau)
    rec = dataset.videos[video_id]
    preds = []
    for sel in known + unknown:
        logits = masks_to_annotation_resolution(
            out["masks"][sel.query], clip.size, clip.pad, clip.orig_size, (rec.height, rec.width)
        )
        cat = 0 if sel.class_index == 0 else model.registry.category_of(sel.class_index)
        preds.append(Prediction(video_id, cat, sel.score, (logits > 0).cpu().numpy()))
    model.train(was_training)
    return preds


def predict_dataset(model: OWVISModel, dataset: Dataset, video_ids: Sequence, k: int, tau: float = 0.05, activation: str = "sigmoid") -> list[Prediction]:
    out = []
    for vid in video_ids:
        out.extend(predict_video(model, dataset, vid, k, tau, activation))
    return out


@dataclass(frozen=True)
class SeparationResult:
    """Mean per-frame box score over object boxes and over size-matched
    background boxes."""

    foreground: float
    background: float
    num_boxes: int

    @property
    def margin(self) -> float:
        return self.foreground - self.background


def _background_box(rng: np.random.Generator, occupied: np.ndarray, w: int, h: int, tries: int = 50) -> tuple[int, int]:
    """Top-left corner of a ``h x w`` box that overlaps ``occupied`` least."""
    H, W = occupied.shape
    best, best_overlap = (0, 0), None
    for _ in range(tries):
        r, c = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
        overlap = int(occupied[r : r + h, c : c + w].sum())
        if best_overlap is None or overlap < best_overlap:
            best, best_overlap = (r, c), overlap
            if overlap == 0:
                break
    return best


@torch.no_grad()
def objectness_separation(
    model: OWVISModel, dataset: Dataset, video_ids: Sequence, seed: int = 0, scorer: str = "sto"
) -> SeparationResult:
    """Score every annotated track's boxes and a same-sized box placed away
    from all objects, frame by frame.

    ``scorer="sto"`` reads the learned objectness map; ``"baseline"`` the
    channel mean of the raw c4 backbone map.
    """
    from .sto import baseline_scorer, objectness_score

    was_training = model.training
    model.eval()
    dtype = _param_dtype(model)
    rng = np.random.default_rng(seed)
    fg_scores, bg_scores = [], []
    for vid in video_ids:
        tracks = dataset.tracks(vid)
        if not tracks:
            continue
        clip = dataset.clip(vid, multiple=32)
        out = model(_to_tensor(clip.frames, dtype))
        (hp, wp), (top, left) = clip.size, clip.pad
        oh, ow = clip.orig_size
        occupied = np.any([np.asarray(t.masks, dtype=bool) for t in tracks], axis=0)
        fg = torch.zeros(len(tracks), clip.num_frames, 4, dtype=torch.float64)
        bg = torch.zeros_like(fg)
        for i, t in enumerate(tracks):
            for m, (cx, cy, bw, bh) in enumerate(np.asarray(t.boxes, dtype=np.float64)):
                if bw == 0 and bh == 0:
                    continue
                fg[i, m] = torch.tensor([(cx * ow + left) / wp, (cy * oh + top) / hp, bw * ow / wp, bh * oh / hp])
                w_px, h_px = max(1, round(bw * ow)), max(1, round(bh * oh))
                r, c = _background_box(rng, occupied[m], w_px, h_px)
                bg[i, m] = torch.tensor(
                    [(c + w_px / 2 + left) / wp, (r + h_px / 2 + top) / hp, w_px / wp, h_px / hp]
                )
        if scorer == "sto":
            if out["o_map"] is None:
                raise ValueError("model has no objectness head; use scorer='baseline'")
            score = lambda b: objectness_score(out["o_map"].double(), b)
        elif scorer == "baseline":
            score = lambda b: baseline_scorer(out["backbone_c4"].double(), b)
        else:
            raise ValueError(f"unknown scorer {scorer!r}")
        frames = (fg[..., 2:] > 0).any(-1).sum(-1).clamp(min=1).double()
        fg_scores += (score(fg) / frames).tolist()
        bg_scores += (score(bg) / frames).tolist()
    model.train(was_training)
    if not fg_scores:
        raise ValueError("no annotated tracks in the given videos")
    return SeparationResult(float(np.mean(fg_scores)), float(np.mean(bg_scores)), len(fg_scores))


def set_determinism(seed: int) -> None:
    """Seed every generator in use and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
