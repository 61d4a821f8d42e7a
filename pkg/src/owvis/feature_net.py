"""Multi-scale feature extraction and the layer-fused transformer encoder.

The encoder attends over the concatenated tokens of all scales of one frame
(dense multi-head attention with learned scale embeddings) and, when fusion
is enabled, adds a scale-wise 1x1-conv fusion of the intermediate layer
outputs to the final layer output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLevel:
    name: str
    stride: int
    features: Tensor  # M x d x h x w
    level: int = -1

    @property
    def area(self) -> int:
        return self.features.shape[-2] * self.features.shape[-1]


@dataclass(frozen=True)
class MultiScaleFeatures:
    levels: tuple[FeatureLevel, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> FeatureLevel:
        return self.levels[i]

    def by_name(self, name: str) -> FeatureLevel:
        for lvl in self.levels:
            if lvl.name == name:
                return lvl
        raise KeyError(name)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(lvl.features.shape) for lvl in self.levels]

    def with_features(self, feats: Sequence[Tensor]) -> "MultiScaleFeatures":
        return MultiScaleFeatures(tuple(replace(l, features=f) for l, f in zip(self.levels, feats)))


def _gn(channels: int) -> nn.GroupNorm:
    # 32 groups at 256 channels; at least 4 channels per group so that 1x1 maps
    # still normalize over more than one value
    return nn.GroupNorm(math.gcd(32, max(channels // 4, 1)), channels)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over dim 1 of a channels-first tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        x = x.movedim(1, -1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.movedim(-1, 1)


class SmallBackbone(nn.Module):
    """Randomly initialised strided CNN standing in for a pretrained backbone.

    Returns the raw stage-3/4/5 maps at strides 8, 16 and 32.
    """

    strides = (8, 16, 32)

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 96, 128)):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("backbone needs 5 stage widths")
        blocks = []
        cin = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, w, 3, stride=2, padding=1),
                    _gn(w),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1),
                    _gn(w),
                    nn.ReLU(inplace=True),
                )
            )
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = tuple(widths[2:])

    def forward(self, x: Tensor) -> list[Tensor]:
        outs = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i >= 2:
                outs.append(x)
        return outs


class ScratchNet(nn.Module):
    """Two 3D conv + layer norm stages; 4x4x4 kernels, spatial stride 4.

    Temporal stride is 1 with (1, 2) zero padding so the clip length is kept.
    """

    def __init__(self, d: int, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, d, kernel_size=4, stride=(1, 4, 4))
        self.norm1 = ChannelLayerNorm(d)
        self.conv2 = nn.Conv3d(d, d, kernel_size=4, stride=(1, 4, 4))
        self.norm2 = ChannelLayerNorm(d)

    @staticmethod
    def _tpad(x: Tensor) -> Tensor:
        # F.pad order: (W_l, W_r, H_t, H_b, T_front, T_back)
        return F.pad(x, (0, 0, 0, 0, 1, 2))

    def forward(self, frames: Tensor) -> Tensor:
        """``frames``: M x 3 x H x W  ->  M x d x H/16 x W/16."""
        m, _, h, w = frames.shape
        if h % 16 or w % 16:
            raise ValueError(f"ScratchNet needs H, W multiples of 16, got {h}x{w}")
        x = frames.transpose(0, 1).unsqueeze(0)  # 1 x 3 x M x H x W
        x = self.norm1(self.conv1(self._tpad(x)))
        x = self.norm2(self.conv2(self._tpad(x)))
        return x[0].transpose(0, 1)


def sine_position(h: int, w: int, d: int, dtype=torch.float32, device=None) -> Tensor:
    """Normalized 2D sinusoidal encoding, d x h x w (half the channels per axis)."""
    npf = d // 2
    scale = 2 * math.pi
    y = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * scale
    x = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * scale
    dim_t = torch.arange(npf, dtype=dtype, device=device)
    dim_t = 10000 ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / npf)
    px = x[:, None] / dim_t
    py = y[:, None] / dim_t
    px = torch.stack((px[:, 0::2].sin(), px[:, 1::2].cos()), dim=2).flatten(1)  # w x npf
    py = torch.stack((py[:, 0::2].sin(), py[:, 1::2].cos()), dim=2).flatten(1)  # h x npf
    pos = torch.cat(
        (py[:, None, :].expand(h, w, npf), px[None, :, :].expand(h, w, npf)), dim=2
    )
    if pos.shape[-1] < d:
        pos = F.pad(pos, (0, d - pos.shape[-1]))
    return pos.permute(2, 0, 1)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        q = src + pos
        src = self.norm1(src + self.attn(q, q, src, need_weights=False)[0])
        return self.norm2(src + self.ffn(src))


class FeatureEnricher(nn.Module):
    """Backbone + ScratchNet streams, scale assembly and the fused encoder."""

    def __init__(
        self,
        d: int = 256,
        n_heads: int = 8,
        ffn_dim: int = 1024,
        enc_layers: int = 6,
        backbone: nn.Module | None = None,
        use_scratch: bool = True,
        use_fusion: bool = True,
        max_frames: int = 64,
        freeze_backbone: bool = False,
    ):
        super().__init__()
        self.d = d
        self.use_scratch = use_scratch
        self.use_fusion = use_fusion and enc_layers > 1
        self.backbone = backbone if backbone is not None else SmallBackbone()
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, d, 1), _gn(d)) for c in self.backbone.out_channels
        )
        self.scratchnet = ScratchNet(d) if use_scratch else None
        self.num_levels = len(self.backbone.out_channels) + int(use_scratch)
        self.level_embed = nn.Parameter(torch.randn(self.num_levels, d) * 0.02)
        self.frame_embed = nn.Embedding(max_frames, d)
        nn.init.normal_(self.frame_embed.weight, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(d, n_heads, ffn_dim) for _ in range(enc_layers))
        if self.use_fusion:
            self.fusion = nn.ModuleList(
                nn.Conv2d((enc_layers - 1) * d, d, 1) for _ in range(self.num_levels)
            )
        else:
            self.fusion = None
        if freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    # -- streams ----------------------------------------------------------- #

    def backbone_forward(self, frames: Tensor) -> tuple[MultiScaleFeatures, list[Tensor]]:
        """Projected 1/8, 1/16, 1/32 maps plus the raw stage outputs."""
        h, w = frames.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"backbone needs H, W multiples of 32, got {h}x{w}")
        raw = self.backbone(frames)
        levels = tuple(
            FeatureLevel(f"c{i + 3}", s, proj(x))
            for i, (s, proj, x) in enumerate(zip(self.backbone.strides, self.input_proj, raw))
        )
        return MultiScaleFeatures(levels), raw

    def scratchnet_forward(self, frames: Tensor) -> Tensor:
        return self.scratchnet(frames)

    @staticmethod
    def assemble_extended(backbone: MultiScaleFeatures, scratch: Tensor | None) -> MultiScaleFeatures:
        """Add the ScratchNet map as its own scale next to the 1/16 backbone entry.

        Entries are ordered by spatial area (descending, stable) and tagged with
        consecutive level ids that index the scale embeddings.
        """
        levels = list(backbone.levels)
        if scratch is not None:
            ref = levels[0].features
            if scratch.shape[1] != ref.shape[1]:
                raise AssemblyError(
                    f"ScratchNet channels {scratch.shape[1]} != backbone latent dim {ref.shape[1]}"
                )
            if scratch.shape[0] != ref.shape[0]:
                raise AssemblyError(f"frame count mismatch: {scratch.shape[0]} vs {ref.shape[0]}")
            pos = next(i for i, l in enumerate(levels) if l.stride == 16) + 1
            levels.insert(pos, FeatureLevel("scratch", 16, scratch))
        levels.sort(key=lambda l: -l.area)
        return MultiScaleFeatures(tuple(replace(l, level=i) for i, l in enumerate(levels)))

    def positional_encodings(self, feats: MultiScaleFeatures) -> list[Tensor]:
        """Per scale: sine(x, y) + scale embedding + frame-index embedding."""
        out = []
        for lvl in feats.levels:
            m, d, h, w = lvl.features.shape
            x = lvl.features
            pos = sine_position(h, w, d, dtype=x.dtype, device=x.device)[None]
            pos = pos + self.level_embed[lvl.level].to(x.dtype)[None, :, None, None]
            frame = self.frame_embed.weight[:m].to(x.dtype)[:, :, None, None]
            out.append(pos + frame)
        return out

    # -- encoder ----------------------------------------------------------- #

    def encoder_layers_forward(
        self, extended: MultiScaleFeatures, positional: Sequence[Tensor]
    ) -> list[list[Tensor]]:
        """Outputs of every encoder layer, split back into per-scale maps."""
        shapes = [lvl.features.shape[-2:] for lvl in extended.levels]
        sizes = [h * w for h, w in shapes]
        src = torch.cat([lvl.features.flatten(2) for lvl in extended.levels], dim=2).transpose(1, 2)
        pos = torch.cat([p.expand_as(l.features).flatten(2) for p, l in zip(positional, extended.levels)], 2)
        pos = pos.transpose(1, 2)
        per_layer = []
        for layer in self.layers:
            src = layer(src, pos)
            chunks = src.transpose(1, 2).split(sizes, dim=2)
            per_layer.append([c.reshape(c.shape[0], c.shape[1], h, w) for c, (h, w) in zip(chunks, shapes)])
        return per_layer

    def encoder_forward(self, extended: MultiScaleFeatures, positional: Sequence[Tensor]) -> MultiScaleFeatures:
        per_layer = self.encoder_layers_forward(extended, positional)
        final = per_layer[-1]
        if self.fusion is None:
            return extended.with_features(final)
        enriched = []
        for k, fuse in enumerate(self.fusion):
            inter = torch.cat([layer_out[k] for layer_out in per_layer[:-1]], dim=1)
            enriched.append(final[k] + fuse(inter))
        return extended.with_features(enriched)

    def forward(self, frames: Tensor) -> tuple[MultiScaleFeatures, list[Tensor], list[Tensor]]:
        """Enriched features, their positional encodings and raw backbone maps."""
        base, raw = self.backbone_forward(frames)
        scratch = self.scratchnet_forward(frames) if self.scratchnet is not None else None
        extended = self.assemble_extended(base, scratch)
        positional = self.positional_encodings(extended)
        return self.encoder_forward(extended, positional), positional, raw

    def load_backbone_state(self, state: dict[str, Tensor]) -> None:
        """Load (pretrained-style) weights into the backbone stream only."""
        self.backbone.load_state_dict(state)
