"""Checkpoint directories: ``meta.json`` plus raw little-endian ``tensors.bin``.

Tensor names are namespaced: ``params/...`` for the model tree,
``opt/m/...`` and ``opt/v/...`` for Adam moments, ``quantizer/...`` for the
shared target quantizer and ``features/...`` for the frozen feature
normalization.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch

META = "meta.json"
BLOB = "tensors.bin"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "uint8": np.uint8,
    "bool": np.bool_,
}


class CheckpointError(ValueError):
    pass


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.ascontiguousarray(x)
    if arr.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr


def save_checkpoint(path, tensors: dict, meta: dict) -> Path:
    """Write ``tensors`` (name -> array/tensor) and ``meta`` atomically into ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(tmp / BLOB, "wb") as f:
        for name in sorted(tensors):
            arr = _to_numpy(tensors[name])
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            f.write(raw)
            index.append({
                "name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw),
            })
            offset += len(raw)
    full_meta = dict(meta, format_version=FORMAT_VERSION, tensors=index)
    (tmp / META).write_text(json.dumps(full_meta, sort_keys=True, indent=1) + "\n")
    if path.exists():
        for p in path.iterdir():
            p.unlink()
        path.rmdir()
    tmp.rename(path)
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / META
    if not meta_path.exists():
        raise CheckpointError(f"{path}: no {META}")
    return json.loads(meta_path.read_text())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; every tensor's checksum is verified."""
    path = Path(path)
    meta = read_meta(path)
    blob = (path / BLOB).read_bytes()
    tensors, end = {}, 0
    names = set()
    for entry in meta["tensors"]:
        name = entry["name"]
        if name in names:
            raise CheckpointError(f"tensor {name} indexed twice")
        names.add(name)
        start, n = entry["offset"], entry["nbytes"]
        raw = blob[start : start + n]
        if len(raw) != n:
            raise CheckpointError(f"tensor {name}: blob truncated")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"tensor {name}: checksum mismatch")
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(
            _DTYPES[entry["dtype"]]
        )
        end = max(end, start + n)
    if end != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - end} unindexed bytes in {BLOB}")
    return tensors, meta


def namespace(tensors: dict, prefix: str) -> dict:
    """Sub-mapping under ``prefix/`` with the prefix stripped."""
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def prefixed(tensors: dict, prefix: str) -> dict:
    p = prefix.rstrip("/") + "/"
    return {p + k: v for k, v in tensors.items()}
