"""Self-describing checkpoint archives.

A checkpoint bundles the architecture spec, model weights, optimizer
state, epoch/step counters, best validation scores, and the RNG states
needed to continue a training trajectory bit-identically. Writes are
atomic (write to a temp file, then rename).
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

from .errors import MissingFileError
from .models import ModelHandle, model_from_state, model_state

FORMAT = "pedseg-checkpoint-v1"


def save_checkpoint(path, handle: ModelHandle, optimizer_state=None, epoch: int = 0,
                    step: int = 0, best=None, rng_state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "model": model_state(handle),
        "optimizer": optimizer_state,
        "epoch": int(epoch),
        "step": int(step),
        "best": best,
        "rng": rng_state,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a recognized checkpoint archive")
    return payload


def load_model_handle(path) -> ModelHandle:
    """Rebuild just the model (spec + weights) from a checkpoint file."""
    return model_from_state(load_checkpoint(path)["model"])
