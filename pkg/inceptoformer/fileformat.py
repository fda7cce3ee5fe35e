"""Versioned binary container used by checkpoints and segment archives.

Layout::

    magic      8 bytes, e.g. b"IFCKPT01"
    length     uint64 little-endian, size of the JSON header in bytes
    header     UTF-8 JSON (sorted keys, compact); ``arrays`` lists name and shape
    payload    every listed array as little-endian float64, row-major, in order
"""

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError


def canonical_json(value):
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def write_container(path, magic, header, arrays):
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays]
    blob = canonical_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, magic):
    """Return (header, {name: array}); raises DataFormatError on any mismatch."""
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise DataFormatError(f"{path}: bad magic header, expected {magic!r}")
    start = len(magic) + 8
    if len(raw) < start:
        raise DataFormatError(f"{path}: truncated header")
    (length,) = struct.unpack_from("<Q", raw, len(magic))
    try:
        header = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: unreadable header ({e})") from None
    offset = start + length
    arrays = {}
    for spec in header.get("arrays", []):
        shape = tuple(spec["shape"])
        count = math.prod(shape)
        if offset + 8 * count > len(raw):
            raise DataFormatError(f"{path}: payload for {spec['name']} is truncated")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[spec["name"]] = values.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
