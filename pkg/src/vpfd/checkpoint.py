"""Checkpoint container shared by vocoder, teacher, student, heads and embedding sidecars.

The file is a safetensors archive. Tensors are stored by parameter name; the
single string metadata entry ``vpfd`` is a JSON object with:

    format   "vpfd-checkpoint"
    version  container version (currently "1")
    kind     what the tensors are ("vocoder", "denoiser", "student", "embeddings", ...)
    config   JSON of the producing config
    meta     JSON of training metadata (steps, losses, ...)

JSON is written with sorted keys and packed into one metadata entry (safetensors
keeps metadata in a hash map, so several entries would serialize in arbitrary
order). Identical inputs therefore give byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file
from safetensors import safe_open

FORMAT = "vpfd-checkpoint"
VERSION = "1"
HEADER_KEY = "vpfd"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str
    tensors: dict
    config: dict
    meta: dict


def save_checkpoint(path, kind: str, tensors: dict, config: dict | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": json.dumps(config or {}, sort_keys=True),
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={HEADER_KEY: json.dumps(header, sort_keys=True)})
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with safe_open(str(path), framework="pt") as f:
            header = json.loads((f.metadata() or {}).get(HEADER_KEY, "{}"))
        tensors = load_file(str(path))
    except (SafetensorError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return Checkpoint(header["kind"], tensors, json.loads(header["config"]), json.loads(header["meta"]))


def module_tensors(module: torch.nn.Module) -> dict:
    return {k: v for k, v in module.state_dict().items()}
