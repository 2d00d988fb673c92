# dge/checkpoint.py
# Purpose: checkpoint format = JSON manifest (name -> shape, dtype, byte offset)
# plus one raw little-endian blob prefixed with the magic "DGE1".

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from dge.errors import CheckpointError

MAGIC = b"DGE1"


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(stem: str | Path, params: Mapping[str, np.ndarray],
                    architecture: Mapping[str, Any]) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict[str, Any]] = {}
    offset = len(MAGIC)
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value)
        dtype = np.dtype(arr.dtype).newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes(order="C")
        entries[name] = {"shape": list(arr.shape), "dtype": dtype.str, "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": MAGIC.decode("ascii"),
        "blob": blob_path.name,
        "architecture": dict(architecture),
        "parameters": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_checkpoint(stem: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(stem)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blob = blob_path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint file missing: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    if not blob.startswith(MAGIC) or manifest.get("format") != MAGIC.decode("ascii"):
        raise CheckpointError(f"{blob_path} is not a DGE1 checkpoint")
    params: dict[str, np.ndarray] = {}
    for name, entry in manifest.get("parameters", {}).items():
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if start + nbytes > len(blob):
            raise CheckpointError(f"parameter {name!r} runs past the end of {blob_path}")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=nbytes // np.dtype(entry["dtype"]).itemsize,
                            offset=start)
        params[name] = arr.reshape(entry["shape"]).copy()
    return manifest, params
