"""Instance-query decoder, prediction branches and the dynamic-kernel mask head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data_model import ClassRegistry
from .feature_net import MultiScaleFeatures, _gn


class RegistryMismatchError(ValueError):
    pass


@dataclass
class DecoderOutput:
    instance: Tensor  # q x d
    box: Tensor  # q x M x d
    reference: Tensor | None = None  # q x 2, normalized (cx, cy) anchor per query


@dataclass
class BranchOutputs:
    class_logits: Tensor  # q x (C+1), column 0 = unknown
    objectness_logits: Tensor  # q
    boxes: Tensor  # q x M x 4, normalized cx cy w h

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[0]


class DecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, d))
        self.norm3 = nn.LayerNorm(d)

    def forward(
        self, tgt: Tensor, query_pos: Tensor, memory: Tensor, pos: Tensor, attn_bias: Tensor | None = None
    ) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        tgt = self.norm2(
            tgt + self.cross_attn(tgt + query_pos, memory + pos, memory, attn_mask=attn_bias, need_weights=False)[0]
        )
        return self.norm3(tgt + self.ffn(tgt))


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, num_layers: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * (num_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_point(points: Tensor, d: int) -> Tensor:
    """Sinusoidal code of normalized (x, y) points, ``... x d``; same
    frequencies as the feature-map encoding so the two are comparable."""
    npf = d // 2
    dim_t = torch.arange(npf, dtype=points.dtype, device=points.device)
    dim_t = 10000 ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / npf)
    out = []
    for axis in (1, 0):  # y first, matching the map encoding
        p = points[..., axis, None] * (2 * math.pi) / dim_t
        out.append(torch.stack((p[..., 0::2].sin(), p[..., 1::2].cos()), dim=-1).flatten(-2))
    code = torch.cat(out, dim=-1)
    return F.pad(code, (0, d - code.shape[-1]))


def token_centers(levels: Sequence, dtype: torch.dtype, device=None) -> Tensor:
    """Normalized (x, y) centre of every flattened token of every level, S x 2."""
    out = []
    for lvl in levels:
        h, w = lvl.features.shape[-2:]
        ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        out.append(torch.stack((gx.flatten(), gy.flatten()), dim=-1))
    return torch.cat(out, dim=0)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class InstanceDecoder(nn.Module):
    """Queries are shared by all frames; each frame refines its own copy (box
    features) and the instance feature is a learned softmax-over-frames
    average of them.

    Each query also owns a reference point predicted from its positional
    embedding; its sine code joins the query's positional term, box centres
    are regressed as offsets from it and, with ``spatial_prior``, cross
    attention logits get a Gaussian penalty -dist^2 / (2 sigma^2) between the
    reference point and each memory token, sigma learned per query. The
    penalty keeps a query's content tied to what lies near its anchor, which
    a small training set cannot teach through global attention alone.
    """

    def __init__(
        self, d: int = 256, n_heads: int = 8, ffn_dim: int = 1024, num_layers: int = 6, spatial_prior: bool = True
    ):
        super().__init__()
        self.d = d
        self.layers = nn.ModuleList(DecoderLayer(d, n_heads, ffn_dim) for _ in range(num_layers))
        self.frame_weight = nn.Linear(d, 1)
        self.ref_point = nn.Linear(d, 2)
        self.ref_pos = MLP(d, d, d, 2)
        self.ref_scale = nn.Linear(d, 1) if spatial_prior else None
        if self.ref_scale is not None:
            nn.init.zeros_(self.ref_scale.weight)
            nn.init.constant_(self.ref_scale.bias, math.log(0.15))

    def attention_bias(self, ref: Tensor, query_pos: Tensor, centers: Tensor) -> Tensor | None:
        """Additive cross-attention bias, q x S."""
        if self.ref_scale is None:
            return None
        sigma = self.ref_scale(query_pos).exp()  # q x 1
        dist2 = ((ref[:, None, :] - centers[None]) ** 2).sum(-1)
        return -dist2 / (2 * sigma**2)

    def forward(
        self,
        enriched: MultiScaleFeatures,
        positional: Sequence[Tensor],
        queries: Tensor,
        query_pos: Tensor,
    ) -> DecoderOutput:
        memory = torch.cat([lvl.features.flatten(2) for lvl in enriched.levels], dim=2).transpose(1, 2)
        pos = torch.cat(
            [p.expand_as(l.features).flatten(2) for p, l in zip(positional, enriched.levels)], 2
        ).transpose(1, 2)
        m = memory.shape[0]
        ref = self.ref_point(query_pos).sigmoid()
        bias = self.attention_bias(ref, query_pos, token_centers(enriched.levels, memory.dtype, memory.device))
        query_pos = query_pos + self.ref_pos(sine_point(ref, self.d))
        tgt = queries.unsqueeze(0).expand(m, -1, -1)
        qpos = query_pos.unsqueeze(0).expand(m, -1, -1)
        for layer in self.layers:
            tgt = layer(tgt, qpos, memory, pos, bias)
        box = tgt.transpose(0, 1)  # q x M x d
        w = self.frame_weight(box).softmax(dim=1)
        return DecoderOutput(instance=(w * box).sum(dim=1), box=box, reference=ref)


def _prior_bias(p: float = 0.01) -> float:
    return -math.log((1 - p) / p)


class PredictionHeads(nn.Module):
    """Class-specific (C+1 logits, unknown at 0), class-agnostic and box branches."""

    def __init__(self, d: int, num_known: int):
        super().__init__()
        self.d = d
        self.class_embed = nn.Linear(d, num_known + 1)
        self.objectness_embed = nn.Linear(d, 1)
        self.box_embed = MLP(d, d, 4, 3)
        nn.init.constant_(self.class_embed.bias, _prior_bias())
        nn.init.constant_(self.objectness_embed.bias, _prior_bias())

    @property
    def num_classes(self) -> int:
        return self.class_embed.out_features

    def forward(self, out: DecoderOutput, registry: ClassRegistry) -> BranchOutputs:
        if self.num_classes != registry.num_known + 1:
            raise RegistryMismatchError(
                f"classifier has {self.num_classes - 1} known classes but the registry has "
                f"{registry.num_known}; call incremental_extend first"
            )
        return BranchOutputs(
            class_logits=self.class_embed(out.instance),
            objectness_logits=self.objectness_embed(out.instance).squeeze(-1),
            boxes=self._boxes(out),
        )

    def _boxes(self, out: DecoderOutput) -> Tensor:
        raw = self.box_embed(out.box)
        if out.reference is not None:
            anchor = inverse_sigmoid(out.reference)[:, None, :]  # q x 1 x 2
            raw = torch.cat((raw[..., :2] + anchor, raw[..., 2:]), dim=-1)
        return raw.sigmoid()

    def incremental_extend(self, registry_old: ClassRegistry, registry_new: ClassRegistry) -> None:
        """Append classifier columns for newly known classes; old columns are copied."""
        if tuple(registry_new.known_ids[: registry_old.num_known]) != registry_old.known_ids:
            raise ValueError(
                f"new registry {registry_new.known_ids} does not extend {registry_old.known_ids}"
            )
        if self.num_classes != registry_old.num_known + 1:
            raise RegistryMismatchError("classifier width does not match the old registry")
        n_new = registry_new.num_known - registry_old.num_known
        if n_new == 0:
            return
        old = self.class_embed
        new = nn.Linear(self.d, registry_new.num_known + 1).to(old.weight.device, old.weight.dtype)
        nn.init.constant_(new.bias, _prior_bias())
        with torch.no_grad():
            new.weight[: old.out_features] = old.weight
            new.bias[: old.out_features] = old.bias
        self.class_embed = new


class SegmentationHead(nn.Module):
    """Per-instance dynamic 1x1 convolutions over a fused 1/8 feature map.

    The kernel parameters come from the instance feature; the input is the
    mask feature map concatenated with each cell's offset from the instance's
    box centre in that frame.
    """

    def __init__(self, d: int, mask_dim: int = 8, hidden: int = 8):
        super().__init__()
        self.lateral = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1), _gn(d), nn.ReLU(inplace=True), nn.Conv2d(d, mask_dim, 1)
        )
        self.dims = [(mask_dim + 2, hidden), (hidden, hidden), (hidden, 1)]
        n_params = sum(cin * cout + cout for cin, cout in self.dims)
        self.controller = nn.Linear(d, n_params)

    def mask_features(self, enriched: MultiScaleFeatures) -> Tensor:
        finest = enriched.levels[0].features
        size = finest.shape[-2:]
        fused = finest
        for lvl in enriched.levels[1:]:
            fused = fused + F.interpolate(lvl.features, size=size, mode="bilinear", align_corners=False)
        return self.lateral(fused)

    def forward(self, instance: Tensor, enriched: MultiScaleFeatures, boxes: Tensor) -> Tensor:
        """Mask logits q x M x H/8 x W/8."""
        feats = self.mask_features(enriched)  # M x Cm x h x w
        m, cm, h, w = feats.shape
        q = instance.shape[0]
        ys = (torch.arange(h, dtype=feats.dtype, device=feats.device) + 0.5) / h
        xs = (torch.arange(w, dtype=feats.dtype, device=feats.device) + 0.5) / w
        centers = boxes.detach()[..., :2]  # q x M x 2
        rel_x = xs[None, None, None, :] - centers[..., 0, None, None]
        rel_y = ys[None, None, :, None] - centers[..., 1, None, None]
        rel = torch.stack((rel_x.expand(q, m, h, w), rel_y.expand(q, m, h, w)), dim=2)
        x = torch.cat((feats.unsqueeze(0).expand(q, -1, -1, -1, -1), rel), dim=2).flatten(3)

        params = self.controller(instance)
        offset = 0
        for i, (cin, cout) in enumerate(self.dims):
            wgt = params[:, offset : offset + cin * cout].view(q, cout, cin)
            offset += cin * cout
            bias = params[:, offset : offset + cout]
            offset += cout
            x = torch.einsum("qoc,qmcp->qmop", wgt, x) + bias[:, None, :, None]
            if i < len(self.dims) - 1:
                x = F.relu(x)
        return x.view(q, m, h, w)
