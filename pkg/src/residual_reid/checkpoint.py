"""Single-file checkpoints: named parameter tensors plus a metadata record.

Layout (a ``torch.save`` dictionary)::

    {"format_version": "1.0",
     "kind": "vae" | "pipeline",
     "config": {...flat config...},
     "epoch": int, "global_step": int,
     "rng_state": {"numpy": <json str>, "torch": ByteTensor},
     "params": {name: tensor, ...},
     "optimizer": optimizer state dict or None,
     "history": [log records]}

Readers accept any file with the same major version.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = "1.0"


def rng_state(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {"numpy": json.dumps(np_rng.bit_generator.state), "torch": torch_gen.get_state()}


def restore_rng(state: dict):
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = json.loads(state["numpy"])
    gen = torch.Generator()
    gen.set_state(state["torch"])
    return np_rng, gen


def save_checkpoint(path, *, kind, params, config, epoch=0, global_step=0, rng=None,
                    optimizer=None, history=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "epoch": int(epoch),
        "global_step": int(global_step),
        "rng_state": rng,
        "params": {k: v.detach().cpu().clone() for k, v in params.items()},
        "optimizer": optimizer,
        "history": list(history or []),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, expected_kind=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = str(payload.get("format_version", "missing"))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise CheckpointError(
            f"checkpoint {path} has format_version {version}, incompatible with reader "
            f"version {FORMAT_VERSION}")
    if expected_kind and payload.get("kind") not in (expected_kind, "pipeline"):
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} checkpoint, "
                              f"expected {expected_kind!r}")
    return payload
