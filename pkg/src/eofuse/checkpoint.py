"""Single-file checkpoint format: length-prefixed JSON manifest + f32 blob.

Layout: 8-byte little-endian manifest length, the UTF-8 JSON manifest
(array names, shapes, byte offsets, and free-form metadata), then one blob of
little-endian float32 data. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import f32

_HEADER = struct.Struct("<Q")


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    (mlen,) = _HEADER.unpack_from(data, 0)
    manifest = json.loads(data[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
    blob = data[_HEADER.size + mlen:]
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = np.ascontiguousarray(arr.reshape(shape)).astype(f32, copy=False)
    return arrays, manifest["meta"]
