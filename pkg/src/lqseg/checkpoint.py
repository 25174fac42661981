"""Checkpoint container.

Layout (little-endian)::

    b"LQSG" | u16 version | u32 header_length | header JSON | payload

The header holds ``config``, ``iteration`` and a ``tensors`` directory mapping
each name to ``{"shape", "offset", "length"}`` (byte extents inside the
payload). Tensors are stored as float32 row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LQSG"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, iteration: int,
                    extra: dict | None = None) -> None:
    directory, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(np.shape(arr)), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {"config": config, "iteration": int(iteration), "tensors": directory}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, tensors as float64 arrays); raises CheckpointError."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", 0) from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file shorter than checkpoint prefix", len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"header length {hlen} overruns file", 6)
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointError(f"malformed header: {exc}", start + pos) from exc
    for key in ("config", "iteration", "tensors"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}", start)
    payload = start + hlen
    size = len(raw) - payload
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        off, length = int(entry["offset"]), int(entry["length"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected:
            raise CheckpointError(f"tensor {name!r} length {length} != {expected} for shape {shape}",
                                  payload + off)
        if off < 0 or off + length > size:
            raise CheckpointError(f"tensor {name!r} extent exceeds payload", payload + min(off, size))
        arr = np.frombuffer(raw, dtype="<f4", count=expected // 4, offset=payload + off)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return header, tensors
