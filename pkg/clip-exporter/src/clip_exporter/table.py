"""CLFT v1 writer.

Byte layout: magic "CLFT", u32 LE version (1), u32 LE count, u32 LE dim,
count*dim float32 LE row-major, then count ids, each a u16 LE byte length
followed by UTF-8 bytes. No padding, no checksum. Rows are written exactly
as given (un-normalized); normalization is the reader's job.
"""

import struct

import numpy as np

MAGIC = b"CLFT"
VERSION = 1


class TableError(ValueError):
    """Rows and ids cannot form a valid table."""


def write_table(path, rows, ids):
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise TableError(f"rows must be 2-d, got shape {rows.shape}")
    if rows.shape[0] != len(ids):
        raise TableError(f"{rows.shape[0]} rows for {len(ids)} ids")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise TableError(f"duplicate ids: {dupes[:5]}")
    if not np.all(np.isfinite(rows)):
        raise TableError("non-finite feature values")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.astype("<f4").tobytes())
        for s in ids:
            raw = s.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise TableError(f"id longer than 65535 bytes: {s[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
