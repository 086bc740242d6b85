"""Named-tensor checkpoint files.

Layout: an 8-byte magic, a 4-byte little-endian manifest length, a canonical
JSON manifest (format version, metadata, tensor table of name/shape/offset),
then raw row-major little-endian IEEE-754 single-precision payloads. Offsets
are relative to the start of the payload region. Canonical JSON plus fixed
tensor order makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import (CheckpointFormatError, CheckpointVersionError,
                     ContractError, StorageError)

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint",
           "inspect_checkpoint"]

MAGIC = b"LORACLCK"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _as_pairs(tensors):
    pairs = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    seen = set()
    for name, _ in pairs:
        if name in seen:
            raise ContractError(f"duplicate tensor name {name!r}")
        seen.add(name)
    return pairs


def save_checkpoint(tensors, path, metadata=None):
    """Write named arrays (dict or (name, array) pairs) as single precision.

    Values are stored as float32; callers snap artifact tensors to
    float32-representable values before saving so the round trip is exact.
    """
    pairs = _as_pairs(tensors)
    table = []
    payloads = []
    offset = 0
    for name, array in pairs:
        data = np.asarray(array).astype("<f4", copy=False)
        table.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += len(payloads[-1])
    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": metadata if metadata is not None else {},
        "tensors": table,
    }
    blob = _canonical_json(manifest)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(blob).to_bytes(4, "little"))
            fh.write(blob)
            for chunk in payloads:
                fh.write(chunk)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_header(raw: bytes, path):
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointFormatError(f"{path}: file shorter than header", offset=0)
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:8]!r}", offset=0)
    length = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 4], "little")
    manifest_start = len(MAGIC) + 4
    if manifest_start + length > len(raw):
        raise CheckpointFormatError(
            f"{path}: manifest length {length} overruns file",
            offset=len(MAGIC))
    try:
        manifest = json.loads(raw[manifest_start:manifest_start + length])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(
            f"{path}: manifest is not valid JSON ({exc.msg})",
            offset=manifest_start) from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    return manifest, manifest_start + length


def load_checkpoint(path):
    """Read a checkpoint -> (dict name -> float64 array, metadata dict)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest, payload_base = _read_header(raw, path)
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = payload_base + entry["offset"]
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(
                f"{path}: tensor {entry['name']!r} payload truncated",
                offset=start)
        flat = np.frombuffer(raw[start:end], dtype="<f4")
        tensors[entry["name"]] = flat.reshape(shape).astype(np.float64)
    return tensors, manifest["metadata"]


def inspect_checkpoint(path):
    """Header-only view: the parsed manifest plus the file size."""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest, _ = _read_header(raw, path)
    return {"file_size": size, **manifest}
