"""Versioned binary checkpoint files.

Layout: an 8-byte magic string with the format version, a JSON
configuration block, then a sequence of named tensors.  Each tensor
record stores its UTF-8 name, a dtype code, the shape, and the raw
array data in little-endian order.  The format is self-delimiting, so
readers detect truncation.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ITDCKPT1"

_DTYPE_CODES = {"<f4": 1, "<f8": 2}
_CODE_DTYPES = {1: "<f4", 2: "<f8"}


class CheckpointError(Exception):
    """Raised for unreadable or malformed checkpoint files."""


def save_checkpoint(path, config, tensors):
    """Write a config dict and named float arrays to path."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            array = np.asarray(array)
            dtype = np.dtype(array.dtype).newbyteorder("<")
            if dtype.str not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {array.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", _DTYPE_CODES[dtype.str]))
            fh.write(struct.pack("<B", array.ndim))
            for extent in array.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns (config dict, name -> array dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
        try:
            config = json.loads(_read_exact(fh, config_len, path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (code,) = struct.unpack("<B", _read_exact(fh, 1, path))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name!r}")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, path))[0] for _ in range(ndim))
            dtype = np.dtype(_CODE_DTYPES[code])
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, size * dtype.itemsize, path)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return config, tensors
