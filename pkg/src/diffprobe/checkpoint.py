"""Named-tensor checkpoint containers with an embedded metadata record."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "_meta_json"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"checkpoint_format_version": CHECKPOINT_FORMAT_VERSION, **meta}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    arrays = {_META_KEY: blob}
    for name, arr in tensors.items():
        if name == _META_KEY:
            raise CheckpointError(f"tensor name {name!r} is reserved")
        arrays[name] = np.asarray(arr)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as archive:
            if _META_KEY not in archive.files:
                raise CheckpointError(f"{path} lacks a metadata record")
            meta = json.loads(archive[_META_KEY].tobytes().decode())
            tensors = {k: archive[k] for k in archive.files if k != _META_KEY}
    except (zipfile.BadZipFile, OSError, EOFError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    version = meta.get("checkpoint_format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: {version}")
    return tensors, meta
