"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"LMPFCKPT"
    8 bytes   uint64 length L of the JSON header
    L bytes   UTF-8 JSON header, keys sorted:
              {"format_version": 1,
               "meta": {...caller metadata, e.g. layer specs...},
               "arrays": [{"name": str, "shape": [int, ...], "dtype": "<f8"}, ...]}
    ...       raw array bytes, C order, in the header's "arrays" order

Arrays are written verbatim, so a save/load round trip is bit-exact and two
saves of identical state produce identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np

MAGIC = b"LMPFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, meta: dict[str, Any], arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    path = Path(path)
    entries = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8"})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    offset = 16 + length
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["meta"], arrays
