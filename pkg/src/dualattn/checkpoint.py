"""Versioned model checkpoints (a ``torch.save`` payload with a format header)."""
from pathlib import Path

import torch

FORMAT = "dualattn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save(path, *, soft=None, agent=None, meta=None):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "meta": dict(meta or {}),
        "soft": None if soft is None else soft.state_dict(),
        "agent": None if agent is None else agent.state_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # pickle/zip errors vary by torch version
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {payload.get('version')} but this build reads version {VERSION}")
    return payload


def restore(payload, soft=None, agent=None):
    """Load state dicts from a payload into the given modules."""
    if soft is not None:
        if payload["soft"] is None:
            raise CheckpointError("checkpoint holds no soft-attention weights")
        soft.load_state_dict(payload["soft"])
    if agent is not None:
        if payload["agent"] is None:
            raise CheckpointError("checkpoint holds no agent weights")
        agent.load_state_dict(payload["agent"])
    return payload["meta"]
