"""Versioned checkpoint container shared by encoder and generator models."""

from __future__ import annotations

from pathlib import Path

import torch

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, component: str, config: dict, state_dict: dict, **extra) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "component": component,
        "config": dict(config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
    }
    payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, component: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path}: missing schema_version field")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {payload['schema_version']}")
    if component is not None and payload.get("component") != component:
        raise CheckpointError(f"{path}: expected a {component} checkpoint, found {payload.get('component')!r}")
    return payload
