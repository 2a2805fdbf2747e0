"""Single-file tensor container.

Layout::

    b"SYNSEG\\x00\\x01"            8-byte magic
    <u64 little-endian>           length of the JSON manifest in bytes
    <JSON manifest>               UTF-8
    <blobs>                       little-endian float32, row-major, concatenated

The manifest carries ``format_version`` (1), a ``tensors`` index of
``{name, shape, offset, nbytes}`` (offsets relative to the first blob byte)
and free-form metadata under ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SYNSEG\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "tensors": index, "meta": meta or {}}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{source}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format_version {version!r}")
    base = 16 + hlen
    body = len(raw) - base
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != 4 * count:
            raise CheckpointError(f"{source}: tensor {name!r} declares {entry['nbytes']} bytes for shape {shape}")
        if entry["offset"] + entry["nbytes"] > body:
            raise CheckpointError(f"{source}: tensor {name!r} runs past end of file (truncated?)")
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(tensors, manifest.get("meta", {}))


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    raw = encode_checkpoint(tensors, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
