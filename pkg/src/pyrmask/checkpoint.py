"""Checkpoint container: every array serialized bit-exactly.

Wire format, in order:
  1. 8-byte magic ``PYRMASK1``
  2. one-line UTF-8 JSON manifest: {"__meta__": {...}, name: {"shape": [...],
     "offset": int}, ...} with offsets measured from the payload start
  3. a single b"\\n" delimiter
  4. concatenated little-endian float64 array payloads

The reserved manifest key ``__meta__`` carries step counters and the
config hash; all other keys are array names.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PYRMASK1"
META_KEY = "__meta__"


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    manifest: dict = {META_KEY: meta}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if name == META_KEY:
            raise DataError(f"array name {META_KEY!r} is reserved")
        # tobytes() serializes in C order on its own; ascontiguousarray
        # would silently promote 0-d arrays to 1-d
        a = np.asarray(arr, dtype="<f8")
        manifest[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    if b"\n" in blob:
        raise DataError("manifest must not contain newlines")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(blob)
        fh.write(b"\n")
        for chunk in chunks:
            fh.write(chunk)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: bad magic, not a checkpoint file")
    split = raw.index(b"\n", len(MAGIC))
    try:
        manifest = json.loads(raw[len(MAGIC):split].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt manifest: {exc}") from exc
    meta = manifest.pop(META_KEY, {})
    payload = raw[split + 1:]
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * n
        if end > len(payload):
            raise DataError(f"{path}: array {name!r} extends past end of file")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, meta
