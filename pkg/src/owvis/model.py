"""The full open-world VIS network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from torch import Tensor, nn

from .data_model import ClassRegistry
from .decoder_heads import InstanceDecoder, PredictionHeads, SegmentationHead
from .feature_net import FeatureEnricher, SmallBackbone
from .sto import ObjectnessHead


@dataclass
class ModelConfig:
    d: int = 256
    n_heads: int = 8
    ffn_dim: int = 1024
    num_queries: int = 300
    enc_layers: int = 6
    dec_layers: int = 6
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    use_scratch: bool = True
    use_fusion: bool = True
    use_sto: bool = True
    mask_dim: int = 8
    max_frames: int = 64
    freeze_backbone: bool = False
    spatial_prior: bool = True  # Gaussian locality bias in decoder cross attention

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(
            d=64, n_heads=4, ffn_dim=128, num_queries=20, enc_layers=2, dec_layers=2,
            backbone_widths=(16, 32, 64, 96, 128),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class OWVISModel(nn.Module):
    def __init__(self, cfg: ModelConfig, registry: ClassRegistry):
        super().__init__()
        self.cfg = cfg
        self.registry = registry
        self.features = FeatureEnricher(
            d=cfg.d,
            n_heads=cfg.n_heads,
            ffn_dim=cfg.ffn_dim,
            enc_layers=cfg.enc_layers,
            backbone=SmallBackbone(cfg.backbone_widths),
            use_scratch=cfg.use_scratch,
            use_fusion=cfg.use_fusion,
            max_frames=cfg.max_frames,
            freeze_backbone=cfg.freeze_backbone,
        )
        self.query_embed = nn.Embedding(cfg.num_queries, cfg.d)
        self.query_pos = nn.Embedding(cfg.num_queries, cfg.d)
        self.decoder = InstanceDecoder(cfg.d, cfg.n_heads, cfg.ffn_dim, cfg.dec_layers, cfg.spatial_prior)
        self.heads = PredictionHeads(cfg.d, registry.num_known)
        self.segmentation = SegmentationHead(cfg.d, cfg.mask_dim)
        self.sto = ObjectnessHead(cfg.d) if cfg.use_sto else None

    def extend_registry(self, registry_new: ClassRegistry) -> None:
        if not registry_new.covers(self.registry):
            raise ValueError("registry may not shrink")
        self.heads.incremental_extend(self.registry, registry_new)
        self.registry = registry_new

    def forward(self, frames: Tensor) -> dict:
        """``frames``: M x 3 x H x W with H, W multiples of 32."""
        h, w = frames.shape[-2:]
        enriched, positional, raw = self.features(frames)
        dec = self.decoder(enriched, positional, self.query_embed.weight, self.query_pos.weight)
        branch = self.heads(dec, self.registry)
        masks = self.segmentation(dec.instance, enriched, branch.boxes)
        o_map = None
        if self.sto is not None:
            o_map = self.sto(enriched.by_name("c4").features, (h // 16, w // 16))
        return {
            "branch": branch,
            "masks": masks,
            "o_map": o_map,
            "backbone_c4": raw[1],
            "enriched": enriched,
            "decoder": dec,
        }
