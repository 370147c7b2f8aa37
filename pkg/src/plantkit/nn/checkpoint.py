"""Checkpoint format: JSON manifest + raw little-endian float64 blob.

Layout of a checkpoint file::

    [4 bytes]  little-endian uint32, manifest length in bytes
    [manifest] UTF-8 JSON: schema, step, entry list {name, shape, offset}
    [blob]     concatenated float64 arrays, offsets relative to blob start

Save followed by load round-trips bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

SCHEMA = "plantkit-checkpoint-v1"

_PARAM = "param"
_M1 = "adam_m"
_M2 = "adam_v"


class CheckpointError(RuntimeError):
    """Raised for corrupt or incompatible checkpoint files."""


def save_checkpoint(
    store: ParamStore,
    path: str | Path,
    meta: dict | None = None,
    include_moments: bool = True,
) -> None:
    path = Path(path)
    entries = []
    chunks: list[bytes] = []
    offset = 0

    def push(kind: str, name: str, array: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append(
            {"name": f"{kind}/{name}", "shape": list(array.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)

    for name, tensor in store.params.items():
        push(_PARAM, name, tensor.data)
    if include_moments:
        for name in store.params:
            push(_M1, name, store.moment1[name])
        for name in store.params:
            push(_M2, name, store.moment2[name])

    manifest = {
        "schema": SCHEMA,
        "step": store.step_count,
        "entries": entries,
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Read a checkpoint back into a fresh ParamStore.

    Returns (store, meta). Truncated or malformed files raise
    CheckpointError rather than crashing downstream.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise CheckpointError(f"{path}: file too short for a header")
    (header_len,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + header_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if manifest.get("schema") != SCHEMA:
        raise CheckpointError(f"{path}: unknown schema {manifest.get('schema')!r}")

    blob = raw[4 + header_len :]
    store = ParamStore()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated blob at entry {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)

    for full_name, array in arrays.items():
        kind, _, name = full_name.partition("/")
        if kind == _PARAM:
            store.add(name, array)
    for full_name, array in arrays.items():
        kind, _, name = full_name.partition("/")
        if kind == _M1 and name in store.params:
            store.moment1[name] = array.copy()
        elif kind == _M2 and name in store.params:
            store.moment2[name] = array.copy()
    store.step_count = int(manifest.get("step", 0))
    return store, manifest.get("meta", {})
