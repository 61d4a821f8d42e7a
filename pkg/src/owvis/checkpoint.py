"""Checkpoint format: flat named-parameter table plus config fingerprint."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch

from .data_model import ClassRegistry
from .model import ModelConfig, OWVISModel

FORMAT = "owvis-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint(config: Any) -> str:
    """sha256 of the canonical (sorted-key, compact) JSON form."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: OWVISModel,
    config_fingerprint: str = "",
    extra: dict[str, Any] | None = None,
) -> None:
    state = model.state_dict()
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "fingerprint": config_fingerprint,
        "model_config": model.cfg.to_dict(),
        "registry": list(model.registry.known_ids),
        "params": {k: v.detach().cpu().clone() for k, v in state.items()},
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> tuple[OWVISModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint {payload['fingerprint'][:12]} does not match "
            f"{expected_fingerprint[:12]}"
        )
    for name, shape in payload["shapes"].items():
        if list(payload["params"][name].shape) != shape:
            raise CheckpointError(f"{path}: parameter {name} has inconsistent shape metadata")
    mc = dict(payload["model_config"])
    mc["backbone_widths"] = tuple(mc["backbone_widths"])
    model = OWVISModel(ModelConfig(**mc), ClassRegistry(tuple(payload["registry"])))
    dtype = next(iter(payload["params"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["params"])
    return model, payload
