"""Single-file container for named float arrays.

Layout (all integers little-endian):

    bytes 0..7    magic ``AVTB0001``
    bytes 8..15   uint64 header length H
    bytes 16..16+H  UTF-8 JSON header
    remainder     raw array bytes

The header is ``{"tensors": {name: {"shape", "dtype", "offset",
"nbytes"}}, "meta": {...}}`` with offsets relative to the start of the
data section. Arrays are stored little-endian in C order, so a write
followed by a read returns bit-identical buffers at the stored
precision. Names are written in sorted order, which makes the file a
deterministic function of its contents.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InputError

_MAGIC = b"AVTB0001"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise InputError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes(order="C")
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path):
    """Read a container; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise InputError(f"{path}: not a tensor container (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for name, entry in header["tensors"].items():
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        arrays[name] = arr.reshape(entry["shape"])
    return arrays, header.get("meta", {})


def save_model(path, model, meta: dict | None = None) -> None:
    params = model.named_parameters()
    save_arrays(path, {name: p.data for name, p in params.items()}, meta=meta)


def load_into_model(path, model):
    """Restore parameters by name; shapes must match exactly."""
    arrays, meta = load_arrays(path)
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise InputError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != p.shape:
            raise InputError(f"checkpoint {name}: shape {arr.shape} vs model {p.shape}")
        p.data = np.ascontiguousarray(arr.astype(p.dtype, copy=False))
    return meta
