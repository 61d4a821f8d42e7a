"""Spatio-temporal objectness: map, box-region scores, pseudo-unknown
selection and the foreground/background contrastive loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

logger = logging.getLogger(__name__)

MAX_EXPONENT = 30.0


class ObjectnessHead(nn.Module):
    """One 3x3x3 conv to a single channel, then a sigmoid."""

    def __init__(self, d: int):
        super().__init__()
        self.conv = nn.Conv3d(d, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, e_k: Tensor, expected_hw: tuple[int, int] | None = None) -> Tensor:
        """``e_k``: M x d x H/16 x W/16 enriched map -> O_map, M x H/16 x W/16."""
        if expected_hw is not None and tuple(e_k.shape[-2:]) != tuple(expected_hw):
            raise ValueError(
                f"objectness input has spatial size {tuple(e_k.shape[-2:])}, expected the "
                f"1/16 scale {tuple(expected_hw)}"
            )
        x = e_k.transpose(0, 1).unsqueeze(0)  # 1 x d x M x h x w
        return self.conv(x)[0, 0].sigmoid()


def box_cell_bounds(boxes: Tensor, height: int, width: int) -> tuple[Tensor, Tensor]:
    """Integer cell ranges ``[r0, r1) x [c0, c1)`` covered by normalized boxes.

    Edges map through floor/ceil and are clipped to the grid. A box whose
    area is below one cell, or an axis that ends up empty, falls back to the
    cell containing the box centre. Returns ``(bounds, empty)`` where bounds is
    ``... x 4`` (r0, r1, c0, c1) and ``empty`` flags all-zero boxes.
    """
    boxes = boxes.detach()
    cx, cy, w, h = boxes.unbind(-1)
    empty = (cx == 0) & (cy == 0) & (w == 0) & (h == 0)

    def axis(center, size, n):
        lo = torch.floor((center - size / 2) * n).clamp(0, n)
        hi = torch.ceil((center + size / 2) * n).clamp(0, n)
        near = torch.floor(center * n).clamp(0, n - 1)
        bad = (hi - lo) < 1
        return torch.where(bad, near, lo), torch.where(bad, near + 1, hi)

    r0, r1 = axis(cy, h, height)
    c0, c1 = axis(cx, w, width)
    tiny = (w * width) * (h * height) < 1
    nr = torch.floor(cy * height).clamp(0, height - 1)
    nc = torch.floor(cx * width).clamp(0, width - 1)
    r0 = torch.where(tiny, nr, r0)
    r1 = torch.where(tiny, nr + 1, r1)
    c0 = torch.where(tiny, nc, c0)
    c1 = torch.where(tiny, nc + 1, c1)
    return torch.stack((r0, r1, c0, c1), dim=-1).long(), empty


def objectness_score(o_map: Tensor, boxes: Tensor) -> Tensor:
    """Per query: sum over frames of the mean map value inside its box.

    ``o_map`` is M x h x w, ``boxes`` q x M x 4 (normalized cx, cy, w, h).
    Differentiable w.r.t. ``o_map`` only; box coordinates are constants.
    """
    m, h, w = o_map.shape
    bounds, empty = box_cell_bounds(boxes, h, w)
    # summed-area table with a zero top row / left column
    integral = F.pad(o_map.cumsum(1).cumsum(2), (1, 0, 1, 0))
    r0, r1, c0, c1 = bounds.unbind(-1)
    frame = torch.arange(m, device=o_map.device).expand_as(r0)
    total = (
        integral[frame, r1, c1]
        - integral[frame, r0, c1]
        - integral[frame, r1, c0]
        + integral[frame, r0, c0]
    )
    count = ((r1 - r0) * (c1 - c0)).to(o_map.dtype)
    mean = torch.where(empty, torch.zeros_like(total), total / count)
    return mean.sum(dim=1)


def baseline_scorer(features: Tensor, boxes: Tensor) -> Tensor:
    """Same box aggregation over the channel-mean of raw backbone features."""
    return objectness_score(features.mean(dim=1), boxes)


@dataclass(frozen=True)
class QueryPartition:
    matched_known: tuple[int, ...]
    pseudo_unknown: tuple[int, ...]
    background: tuple[int, ...]

    @property
    def foreground(self) -> tuple[int, ...]:
        return self.matched_known + self.pseudo_unknown

    @property
    def num_queries(self) -> int:
        return len(self.matched_known) + len(self.pseudo_unknown) + len(self.background)


def select_pseudo_unknowns(scores: Sequence[float] | Tensor, matched_known: Iterable[int], p_u: int) -> QueryPartition:
    """Top-``p_u`` unmatched queries by score become pseudo-unknowns.

    Ties go to the lower query index; the background keeps the same
    descending-score order.
    """
    if isinstance(scores, Tensor):
        scores = scores.detach().cpu().tolist()
    scores = [float(s) for s in scores]
    matched = tuple(int(i) for i in matched_known)
    matched_set = set(matched)
    rest = [i for i in range(len(scores)) if i not in matched_set]
    if p_u > len(rest):
        logger.warning("p_u=%d exceeds %d unmatched queries; clamping", p_u, len(rest))
        p_u = len(rest)
    p_u = max(int(p_u), 0)
    order = sorted(rest, key=lambda i: (-scores[i], i))
    return QueryPartition(matched, tuple(order[:p_u]), tuple(order[p_u:]))


def contrastive_loss(scores: Tensor, partition: QueryPartition, normalize: bool = False) -> Tensor:
    """``exp(-(S_fg - S_bg))`` with the exponent capped at 30.

    ``normalize`` divides each sum by its set size (off by default).
    """
    fg = list(partition.foreground)
    bg = list(partition.background)
    zero = scores.new_zeros(())
    s_fg = scores[fg].sum() if fg else zero
    s_bg = scores[bg].sum() if bg else zero
    if normalize:
        s_fg = s_fg / max(len(fg), 1)
        s_bg = s_bg / max(len(bg), 1)
    return torch.exp(torch.clamp(s_bg - s_fg, max=MAX_EXPONENT))


def dump_diagnostics(path: str | Path, o_map: Tensor, scores: Tensor, partition: QueryPartition | None = None) -> None:
    """Write the objectness map and per-query scores to an ``.npz`` archive."""
    arrays = {
        "o_map": o_map.detach().cpu().numpy(),
        "scores": scores.detach().cpu().numpy(),
    }
    if partition is not None:
        arrays["matched_known"] = np.asarray(partition.matched_known, dtype=np.int64)
        arrays["pseudo_unknown"] = np.asarray(partition.pseudo_unknown, dtype=np.int64)
        arrays["background"] = np.asarray(partition.background, dtype=np.int64)
    np.savez(Path(path), **arrays)
