"""Point-cloud files.

Binary record (little-endian)::

    4 bytes  magic b"PCLD"
    1 byte   version (1)
    1 byte   flags (bit 0: per-point labels present)
    2 bytes  reserved, zero
    8 bytes  uint64 point count N
    N*24     float64 x, y, z triplets
    N        uint8 labels, only when flag bit 0 is set

Records can be concatenated; ``read_records`` walks such a stream. CSV
output has a ``x,y,z[,label]`` header and uses ``repr`` floats so it
round-trips exactly.
"""

import csv
import io
import struct

import numpy as np

from ..errors import ShapeError
from .ops import PointCloud

MAGIC = b"PCLD"
_HEAD = struct.Struct("<4sBBHQ")


def encode(cloud):
    pts = np.ascontiguousarray(cloud.points, dtype="<f8")
    has_labels = cloud.labels is not None
    head = _HEAD.pack(MAGIC, 1, 1 if has_labels else 0, 0, pts.shape[0])
    body = pts.tobytes()
    if has_labels:
        labels = np.asarray(cloud.labels)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
            raise ShapeError("labels must fit in one unsigned byte")
        body += labels.astype(np.uint8).tobytes()
    return head + body


def decode(buf, offset=0):
    """Decode one record at ``offset``; returns ``(cloud, next_offset)``."""
    magic, version, flags, _, count = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC or version != 1:
        raise ValueError("not a PCLD record")
    pos = offset + _HEAD.size
    pts = np.frombuffer(buf, dtype="<f8", count=count * 3, offset=pos).reshape(count, 3).astype(np.float64)
    pos += count * 24
    labels = None
    if flags & 1:
        labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos).astype(np.int64)
        pos += count
    return PointCloud(pts, labels), pos


def read_records(buf):
    out, pos = [], 0
    while pos < len(buf):
        cloud, pos = decode(buf, pos)
        out.append(cloud)
    return out


def write_cloud(path, cloud):
    with open(path, "wb") as fh:
        fh.write(encode(cloud))


def read_cloud(path):
    with open(path, "rb") as fh:
        return decode(fh.read())[0]


def to_csv(cloud):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_labels = cloud.labels is not None
    w.writerow(["x", "y", "z", "label"] if has_labels else ["x", "y", "z"])
    for i, p in enumerate(cloud.points):
        row = [repr(float(v)) for v in p]
        if has_labels:
            row.append(int(cloud.labels[i]))
        w.writerow(row)
    return buf.getvalue()


def from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    pts = np.array([[float(v) for v in r[:3]] for r in body], dtype=np.float64).reshape(-1, 3)
    labels = np.array([int(r[3]) for r in body]) if len(header) > 3 else None
    return PointCloud(pts, labels)
