"""Flat parameter manifest: ordered ``(name, shape, values)`` records.

Layout (all integers little-endian)::

    8 bytes   magic  b"PBCKPT01"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header {"records": [...], "meta": {...}}
    payload   concatenated raw arrays in record order

Each record is ``{"name", "shape", "dtype", "offset", "nbytes"}`` with
``dtype`` one of ``"<f8"`` or ``"<i8"`` and ``offset`` relative to the start
of the payload. Round trips are bit-exact.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from ..errors import CheckpointError

MAGIC = b"PBCKPT01"
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _as_record_array(value):
    arr = np.asarray(value)
    if arr.dtype.kind in "iub":
        return np.array(arr, dtype="<i8", order="C"), "<i8"
    if arr.dtype.kind == "f":
        return np.array(arr, dtype="<f8", order="C"), "<f8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(arrays, meta=None):
    records = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr, code = _as_record_array(value)
        raw = arr.tobytes(order="C")
        records.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"records": records, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def loads(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode())
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    base = 16 + hlen
    arrays = OrderedDict()
    for rec in header["records"]:
        dtype = _DTYPES.get(rec["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown dtype {rec['dtype']}")
        start = base + rec["offset"]
        chunk = buf[start:start + rec["nbytes"]]
        if len(chunk) != rec["nbytes"]:
            raise CheckpointError(f"truncated record {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(tuple(rec["shape"])).astype(dtype.newbyteorder("="))
    return arrays, header.get("meta", {})


def save(path, arrays, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, meta))


def load(path):
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None


def prefixed(prefix, state):
    return OrderedDict((f"{prefix}.{k}", v) for k, v in state.items())


def extract(prefix, arrays):
    """Sub-dictionary of records under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return OrderedDict((k[len(head):], v) for k, v in arrays.items() if k.startswith(head))
