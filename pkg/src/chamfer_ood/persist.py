"""Checkpoint and tabular-output helpers shared by the training stages."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import torch

from .exceptions import CheckpointError

CHECKPOINT_FORMAT_VERSION = 1


def config_hash(payload: dict) -> str:
    """Stable hash of a JSON-serializable config dict."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(payload: dict, path: Path):
    """Atomic checkpoint write: the file appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path, expected_kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    if payload.get("kind") != expected_kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {expected_kind!r}")
    return payload


def write_csv(path: Path, header: list[str], rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
