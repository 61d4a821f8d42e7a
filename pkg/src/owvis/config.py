"""Run configuration: one nested JSON document, ``key=value`` overrides and a
content fingerprint."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

from .matching_losses import CostWeights, LossConfig
from .model import ModelConfig
from .protocol import TrainSchedule


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": None,
    "data": {
        "annotations": None,
        "frames_root": None,
        # used when no annotation file is given
        "synth": {"num_videos": 24, "frames_per_video": 3, "resolution": [64, 64], "seed": 0},
    },
    "split_file": None,
    "split": {
        "split_name": "desk",
        "task1_supercats": ["Human", "Animals"],
        "task2_supercats": ["Vehicle", "Others"],
        "test_fraction": 0.2,
    },
    "model": ModelConfig().to_dict() | {"backbone_widths": list(ModelConfig().backbone_widths)},
    "sto": {"p_u": 5, "normalize": False},
    "loss": {
        "alpha": 1.0,
        "focal_gamma": 2.0,
        "focal_alpha": 0.25,
        "cost_class": 2.0,
        "cost_l1": 5.0,
        "cost_giou": 2.0,
        "literal_l1_mask": False,
    },
    "schedule": TrainSchedule().to_dict(),
    "protocol": {"k": 10, "tau": 0.05, "exemplars_per_class": 20, "replay": True, "activation": "sigmoid"},
    "eval": {"max_dets_ap": 100, "random_baseline_per_video": 3},
}

# Small model and short clips for CPU runs on the synthetic set.
DESK_OVERRIDES: dict[str, Any] = {
    "model.d": 64,
    "model.n_heads": 4,
    "model.ffn_dim": 128,
    "model.num_queries": 20,
    "model.enc_layers": 2,
    "model.dec_layers": 2,
    "model.backbone_widths": [16, 32, 64, 96, 128],
    "sto.p_u": 2,
    "sto.normalize": True,
    "schedule.clip_length": 3,
    "schedule.learning_rate": 3e-4,
    "schedule.max_shift": 0.125,
    "schedule.task1_epochs": 500,
    "schedule.task2_epochs": 300,
    "schedule.finetune_epochs": 80,
    "protocol.k": 3,
    "protocol.exemplars_per_class": 4,
}

PRESETS = {"full": {}, "desk": DESK_OVERRIDES}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def apply_overrides(cfg: dict, overrides: list[str] | dict[str, Any]) -> dict:
    items = overrides.items() if isinstance(overrides, dict) else (_split_override(o) for o in overrides)
    for key, value in items:
        set_key(cfg, key, value)
    return cfg


def _split_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), _parse_value(value)


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "synth":
            _merge(base[k], v, where + k + ".")
        else:
            base[k] = v


def build_config(path: str | Path | None = None, preset: str = "full", overrides: list[str] | None = None) -> dict:
    """Defaults, then the preset, then the file, then ``--set`` overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(DEFAULTS)
    apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        try:
            _merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
    apply_overrides(cfg, overrides or [])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        model_config(cfg)
        schedule(cfg).validate()
        loss_config(cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    if cfg["sto"]["p_u"] < 0:
        raise ConfigError("sto.p_u must be >= 0")
    p = cfg["protocol"]
    if p["k"] < 1 or p["exemplars_per_class"] < 1:
        raise ConfigError("protocol.k and protocol.exemplars_per_class must be >= 1")
    if not 0 <= p["tau"] < 1:
        raise ConfigError("protocol.tau must lie in [0, 1)")
    m = cfg["model"]
    if m["d"] % m["n_heads"]:
        raise ConfigError("model.d must be divisible by model.n_heads")


def fingerprint(cfg: dict) -> str:
    """sha256 of the canonical JSON of everything but the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["backbone_widths"] = tuple(m["backbone_widths"])
    return ModelConfig(**m)


def schedule(cfg: dict) -> TrainSchedule:
    s = dict(cfg["schedule"])
    s["seed"] = cfg["seed"]
    return TrainSchedule(**s)


def loss_config(cfg: dict, pseudo_scorer: str = "sto") -> LossConfig:
    l = cfg["loss"]
    use_sto = cfg["model"]["use_sto"]
    return LossConfig(
        alpha=l["alpha"],
        focal_gamma=l["focal_gamma"],
        focal_alpha=l["focal_alpha"],
        cost=CostWeights(l["cost_class"], l["cost_l1"], l["cost_giou"]),
        mask_mode="l1" if l["literal_l1_mask"] else "dice_focal",
        p_u=cfg["sto"]["p_u"],
        normalize_contrastive=cfg["sto"]["normalize"],
        pseudo_scorer=pseudo_scorer if use_sto else "baseline",
        use_contrastive=use_sto,
    )
