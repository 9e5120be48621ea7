"""Single-file tensor checkpoints.

Layout::

    b"P2DT"                      magic
    u32 little-endian            format version
    u64 little-endian            manifest length in bytes
    manifest                     UTF-8 JSON, keys sorted
    blobs                        little-endian float64 data, concatenated

The manifest maps each tensor name to its shape, dtype ("f64"), byte offset
(relative to the start of the blob section) and byte length, and may carry a
free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"P2DT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a P2DT checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(buf[16 : 16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    base = 16 + mlen
    out = {}
    for name, e in manifest["tensors"].items():
        if e["dtype"] != "f64":
            raise CheckpointError(f"{name}: unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        raw = buf[start : start + e["length"]]
        if len(raw) != e["length"]:
            raise CheckpointError(f"{name}: truncated blob")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return out, manifest.get("meta", {})


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
