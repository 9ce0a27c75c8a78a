"""Self-describing checkpoint archives: weights + JSON metadata + config hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch


class CheckpointError(RuntimeError):
    """Raised when a checkpoint is malformed or its config hash does not match."""


def canonical_hash(obj) -> str:
    """sha256 over a canonical JSON encoding; stable across dict insertion order."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], meta: dict) -> None:
    """Persist a state dict plus metadata; `meta` must contain a 'config' entry."""
    if "config" not in meta:
        raise CheckpointError("checkpoint metadata must carry a 'config' entry")
    meta = dict(meta)
    meta["config_hash"] = canonical_hash(meta["config"])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"meta_json": json.dumps(meta), "state": state}, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Load and validate a checkpoint; the stored config hash must recompute."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupted archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "meta_json" not in payload or "state" not in payload:
        raise CheckpointError(f"checkpoint {path} is missing metadata or state")
    meta = json.loads(payload["meta_json"])
    expected = meta.get("config_hash")
    actual = canonical_hash(meta.get("config"))
    if expected != actual:
        raise CheckpointError(
            f"config hash mismatch in {path}: stored {expected!r}, recomputed {actual!r}"
        )
    return payload["state"], meta
