"""Checkpoint container: a safetensors file with little-endian float32 payloads.

The header metadata carries a JSON document with the embedder ``kind``, the
model configuration (for transformer models) and any extra fields a kind
needs.  Loaders check every tensor shape before accepting the file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from safetensors import SafetensorError
from safetensors.numpy import load_file, save_file

from .encoder import BehaviorEncoder, ModelConfig

META_KEY = "gblum"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    payload = {k: np.ascontiguousarray(np.asarray(v), dtype="<f4") for k, v in tensors.items()}
    save_file(payload, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors = load_file(str(path))
        with open(path, "rb") as fh:
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n))
    except (SafetensorError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    meta = header.get("__metadata__", {})
    if META_KEY not in meta:
        raise CheckpointError(f"{path}: missing {META_KEY!r} metadata")
    return tensors, json.loads(meta[META_KEY])


def save_encoder(path, model: BehaviorEncoder, kind: str, extra: dict | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": kind, "model_config": model.config.to_dict(), **(extra or {})}
    save_tensors(path, tensors, meta)


def load_encoder(path, dtype=torch.float32) -> tuple[BehaviorEncoder, dict]:
    tensors, meta = load_tensors(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: not an encoder checkpoint (kind={meta.get('kind')!r})")
    config = ModelConfig(**meta["model_config"])
    model = BehaviorEncoder(config, dtype=dtype)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in tensors.items()}
    if expected.keys() != got.keys():
        missing, unexpected = expected.keys() - got.keys(), got.keys() - expected.keys()
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}, unexpected {sorted(unexpected)}")
    for k, shape in expected.items():
        if got[k] != shape:
            raise CheckpointError(f"{path}: tensor {k!r} has shape {got[k]}, config implies {shape}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    model.eval()
    return model, meta
