"""Binary dataset container.

Layout (all integers little-endian)::

    magic       4 bytes  b"IDDS"
    version     uint32
    header_len  uint32
    header      UTF-8 JSON, ``header_len`` bytes
    body        float32 arrays, row-major, concatenated in header order

The JSON header carries ``arrays`` (name, shape), the modality ``layout``,
the generator ``seed`` and the ``spec_hash`` of the dataset spec, plus any
extra metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"IDDS"
CONTAINER_VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    *,
    layout: dict | None = None,
    seed: int | None = None,
    spec_hash: str | None = None,
    meta: dict[str, Any] | None = None,
) -> Path:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = {
        "arrays": entries,
        "layout": layout,
        "seed": seed,
        "spec_hash": spec_hash,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path} is not a dataset container")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ContainerError(f"truncated body while reading {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError("trailing bytes after last array")
    return header, arrays
