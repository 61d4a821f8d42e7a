"""Bipartite matching, component losses and the total training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .data_model import ClassRegistry, InstanceTrack, VideoClip
from .decoder_heads import BranchOutputs
from .sto import QueryPartition, baseline_scorer, contrastive_loss, objectness_score, select_pseudo_unknowns


class MatchingError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


# --------------------------------------------------------------------------- #
# Box helpers
# --------------------------------------------------------------------------- #


def box_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=-1)


def generalized_box_iou(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise GIoU of xyxy boxes, ``N x K``."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union.clamp(min=1e-12)
    lt_c = torch.min(a[:, None, :2], b[None, :, :2])
    rb_c = torch.max(a[:, None, 2:], b[None, :, 2:])
    hull = (rb_c - lt_c).clamp(min=0).prod(-1)
    return iou - (hull - union) / hull.clamp(min=1e-12)


# --------------------------------------------------------------------------- #
# Targets
# --------------------------------------------------------------------------- #


@dataclass
class Targets:
    """Ground truth of one clip in classifier/box space.

    ``boxes`` are normalized to the (padded) model input frame; ``masks`` stay
    at annotation resolution. ``valid`` marks frames with a nonempty mask.
    """

    labels: Tensor  # K, classifier column (>= 1)
    boxes: Tensor  # K x M x 4
    masks: Tensor  # K x M x h x w, float {0, 1}
    valid: Tensor  # K x M bool
    input_size: tuple[int, int] = (0, 0)
    pad: tuple[int, int] = (0, 0)
    orig_size: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_tracks(
        cls,
        tracks: Sequence[InstanceTrack],
        registry: ClassRegistry,
        clip: VideoClip,
        dtype=torch.float32,
    ) -> "Targets":
        m = clip.num_frames
        hp, wp = clip.size
        top, left = clip.pad
        oh, ow = clip.orig_size
        labels, boxes, masks = [], [], []
        for t in tracks:
            if t.category_id not in registry.known_ids:
                raise MatchingError(f"category {t.category_id} is not known to the registry")
            labels.append(registry.class_index(t.category_id))
            b = torch.as_tensor(np.asarray(t.boxes, dtype=np.float64))
            padded = torch.stack(
                ((b[:, 0] * ow + left) / wp, (b[:, 1] * oh + top) / hp, b[:, 2] * ow / wp, b[:, 3] * oh / hp),
                dim=-1,
            )
            empty = (b == 0).all(dim=-1, keepdim=True)
            boxes.append(torch.where(empty, torch.zeros_like(padded), padded))
            masks.append(torch.as_tensor(np.asarray(t.masks, dtype=np.float32)))
        if labels:
            masks_t = torch.stack(masks).to(dtype)
            boxes_t = torch.stack(boxes).to(dtype)
        else:
            masks_t = torch.zeros((0, m, oh, ow), dtype=dtype)
            boxes_t = torch.zeros((0, m, 4), dtype=dtype)
        return cls(
            labels=torch.as_tensor(labels, dtype=torch.long),
            boxes=boxes_t,
            masks=masks_t,
            valid=masks_t.flatten(2).amax(-1) > 0,
            input_size=(hp, wp),
            pad=(top, left),
            orig_size=(oh, ow),
        )


def masks_to_annotation_resolution(
    mask_logits: Tensor, input_size: tuple[int, int], pad: tuple[int, int], orig_size: tuple[int, int], out_size: tuple[int, int]
) -> Tensor:
    """Upsample ``... x h8 x w8`` logits to the input frame, drop padding and
    resize to the annotation resolution."""
    lead = mask_logits.shape[:-2]
    x = mask_logits.reshape(-1, 1, *mask_logits.shape[-2:])
    x = F.interpolate(x, size=input_size, mode="bilinear", align_corners=False)
    top, left = pad
    x = x[..., top : top + orig_size[0], left : left + orig_size[1]]
    if tuple(orig_size) != tuple(out_size):
        x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
    return x.reshape(*lead, *out_size)


# --------------------------------------------------------------------------- #
# Matching
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class MatchResult:
    assignment: tuple[tuple[int, int], ...]
    cost: float

    @property
    def query_indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.assignment)

    @property
    def gt_indices(self) -> tuple[int, ...]:
        return tuple(j for _, j in self.assignment)


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    box: float = 5.0
    giou: float = 2.0


def _lsap_min(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def solve_assignment(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of every column (ground truth) to a distinct row
    (query). Among optimal assignments the lexicographically smallest list of
    (query, gt) pairs is returned."""
    cost = np.asarray(cost, dtype=np.float64)
    n, k = cost.shape
    if k > n:
        raise MatchingError(f"{k} ground-truth instances exceed {n} queries")
    if k == 0:
        return MatchResult((), 0.0)
    best = _lsap_min(cost)
    tol = 1e-9 * max(1.0, abs(best))

    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    free_rows = list(range(n))
    free_cols = list(range(k))
    for i in range(n):
        if not free_cols:
            break
        free_rows.remove(i)
        for j in free_cols:
            rest = [c for c in free_cols if c != j]
            if len(rest) > len(free_rows):
                continue
            base = fixed + cost[i, j]
            sub = cost[np.ix_(free_rows, rest)]
            if rest and base + sub.min(axis=0).sum() > best + tol:
                continue
            if base + _lsap_min(sub) <= best + tol:
                pairs.append((i, j))
                fixed = base
                free_cols.remove(j)
                break
    return MatchResult(tuple(pairs), float(sum(cost[i, j] for i, j in pairs)))


def match_cost_matrix(outputs: BranchOutputs, targets: Targets, weights: CostWeights = CostWeights()) -> Tensor:
    """``q x K`` cost: class (1 - p), mean per-frame L1 and mean (1 - GIoU).

    Frames where the ground truth is empty are left out of the box terms.
    """
    q = outputs.num_queries
    k = len(targets)
    prob = outputs.class_logits.sigmoid()
    cost_cls = 1.0 - prob[:, targets.labels]  # q x K
    pred = outputs.boxes  # q x M x 4
    gt = targets.boxes  # K x M x 4
    valid = targets.valid.to(pred.dtype)  # K x M
    l1 = (pred[:, None] - gt[None]).abs().sum(-1)  # q x K x M
    m = pred.shape[1]
    giou = torch.stack(
        [
            generalized_box_iou(box_cxcywh_to_xyxy(pred[:, f]), box_cxcywh_to_xyxy(gt[:, f]))
            for f in range(m)
        ],
        dim=-1,
    )  # q x K x M
    n_valid = valid.sum(-1).clamp(min=1)[None]  # 1 x K
    cost_box = (l1 * valid[None]).sum(-1) / n_valid
    cost_giou = ((1.0 - giou) * valid[None]).sum(-1) / n_valid
    return (weights.cls * cost_cls + weights.box * cost_box + weights.giou * cost_giou).reshape(q, k)


@torch.no_grad()
def hungarian_match(outputs: BranchOutputs, targets: Targets, weights: CostWeights = CostWeights()) -> MatchResult:
    if len(targets) > outputs.num_queries:
        raise MatchingError(
            f"{len(targets)} ground-truth instances exceed {outputs.num_queries} queries"
        )
    cost = match_cost_matrix(outputs, targets, weights).double().cpu().numpy()
    if not np.isfinite(cost).all():
        raise NonFiniteLossError("match_cost", float(cost[~np.isfinite(cost)][0]))
    return solve_assignment(cost)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


def focal_loss(
    logits: Tensor,
    targets: Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    normalizer: float | None = None,
) -> Tensor:
    """Sigmoid focal loss ``-alpha (1 - p_t)^gamma log p_t`` summed over entries.

    ``targets`` is either a {0, 1} tensor shaped like ``logits`` or integer
    class indices shaped ``logits.shape[:-1]`` (-1 = no object, i.e. an
    all-zero row). The sum is divided by ``normalizer`` or, when None, by the
    number of entries.
    """
    if targets.dtype in (torch.int64, torch.int32) and targets.shape == logits.shape[:-1]:
        onehot = torch.zeros_like(logits)
        pos = targets >= 0
        onehot[pos, targets[pos]] = 1.0
        targets = onehot
    targets = targets.to(logits.dtype)
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = alpha * (1 - p_t) ** gamma * ce
    if normalizer is None:
        return loss.mean()
    return loss.sum() / normalizer


def dice_loss(mask_logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over instances of ``1 - (2|P.T| + 1) / (|P| + |T| + 1)``."""
    p = mask_logits.sigmoid().flatten(1)
    t = targets.flatten(1)
    num = 2 * (p * t).sum(1) + 1
    den = p.sum(1) + t.sum(1) + 1
    return (1 - num / den).mean()


def regression_loss(
    pred_boxes: Tensor,
    pred_masks: Tensor,
    targets: Targets,
    match: MatchResult,
    mask_mode: str = "dice_focal",
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> tuple[Tensor, Tensor]:
    """Box L1 over matched pairs and nonempty frames, and the mask loss.

    ``pred_masks`` are logits at 1/8 of the input frame; they are resized to
    annotation resolution first. Empty ground-truth frames count as all-zero
    mask targets.
    """
    zero = pred_boxes.sum() * 0.0
    if not match.assignment:
        return zero, zero + pred_masks.sum() * 0.0
    qi = torch.as_tensor(match.query_indices, dtype=torch.long)
    gi = torch.as_tensor(match.gt_indices, dtype=torch.long)
    valid = targets.valid[gi]  # n x M
    diff = (pred_boxes[qi] - targets.boxes[gi]).abs().mean(-1)  # n x M
    n_valid = int(valid.sum())
    l_box = (diff * valid.to(diff.dtype)).sum() / n_valid if n_valid else zero

    logits = masks_to_annotation_resolution(
        pred_masks[qi], targets.input_size, targets.pad, targets.orig_size, tuple(targets.masks.shape[-2:])
    )
    tgt = targets.masks[gi].to(logits.dtype)
    if mask_mode == "l1":
        l_mask = (logits.sigmoid() - tgt).abs().mean()
    elif mask_mode == "dice_focal":
        l_mask = dice_loss(logits.flatten(1), tgt.flatten(1)) + focal_loss(logits, tgt, gamma, alpha)
    else:
        raise ValueError(f"unknown mask loss mode {mask_mode!r}")
    return l_box, l_mask


@dataclass
class LossBundle:
    L_c: Tensor
    L_f: Tensor
    L_r_box: Tensor
    L_r_mask: Tensor
    L_contr: Tensor
    alpha: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self) if f.name != "alpha"}


def total_loss(bundle: LossBundle) -> Tensor:
    for name in ("L_c", "L_f", "L_r_box", "L_r_mask", "L_contr"):
        v = float(getattr(bundle, name).detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return bundle.L_c + (bundle.L_r_box + bundle.L_r_mask) + bundle.alpha * bundle.L_f + bundle.L_contr


@dataclass
class LossConfig:
    alpha: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cost: CostWeights = CostWeights()
    mask_mode: str = "dice_focal"
    p_u: int = 5
    normalize_contrastive: bool = False
    pseudo_scorer: str = "sto"  # "sto" | "baseline"
    use_contrastive: bool = True


@dataclass
class ClipLossResult:
    bundle: LossBundle
    total: Tensor
    match: MatchResult
    partition: QueryPartition
    scores: Tensor


def clip_loss(outputs: dict, targets: Targets, cfg: LossConfig) -> ClipLossResult:
    """Full training loss for one clip from the model's raw outputs.

    Matched queries learn their class; the ``p_u`` unmatched queries with the
    highest objectness become pseudo-unknowns (class 0); the rest are
    background. Pseudo-unknowns get no box or mask supervision.
    """
    branch: BranchOutputs = outputs["branch"]
    match = hungarian_match(branch, targets, cfg.cost)

    boxes = branch.boxes.detach()
    if cfg.pseudo_scorer == "sto":
        scores = objectness_score(outputs["o_map"], boxes)
    elif cfg.pseudo_scorer == "baseline":
        scores = baseline_scorer(outputs["backbone_c4"].detach(), boxes)
    else:
        raise ValueError(f"unknown pseudo scorer {cfg.pseudo_scorer!r}")
    partition = select_pseudo_unknowns(scores.detach(), match.query_indices, cfg.p_u)

    q = branch.num_queries
    cls_t = torch.full((q,), -1, dtype=torch.long)
    for qi, gi in match.assignment:
        cls_t[qi] = int(targets.labels[gi])
    for qi in partition.pseudo_unknown:
        cls_t[qi] = 0
    n_fg = max(len(partition.foreground), 1)
    l_c = focal_loss(branch.class_logits, cls_t, cfg.focal_gamma, cfg.focal_alpha, normalizer=n_fg)
    fg_t = (cls_t >= 0).to(branch.objectness_logits.dtype)
    l_f = focal_loss(branch.objectness_logits, fg_t, cfg.focal_gamma, cfg.focal_alpha, normalizer=n_fg)
    l_box, l_mask = regression_loss(
        branch.boxes, outputs["masks"], targets, match, cfg.mask_mode, cfg.focal_gamma, cfg.focal_alpha
    )
    if cfg.use_contrastive and cfg.pseudo_scorer == "sto":
        l_contr = contrastive_loss(scores, partition, cfg.normalize_contrastive)
    else:
        l_contr = l_c.new_zeros(())
    bundle = LossBundle(l_c, l_f, l_box, l_mask, l_contr, cfg.alpha)
    return ClipLossResult(bundle, total_loss(bundle), match, partition, scores)
