"""Per-image feature table: bit-exact binary storage, synthetic providers,
and insertion of the feature as a trainable token after the CLS token.

File layout (version 1): magic "CLFT", u32 LE version, u32 LE count,
u32 LE dim, count*dim float32 LE row-major, then count ids, each a u16 LE
byte length followed by UTF-8 bytes. No padding, no checksum.
"""

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .rng import stream

MAGIC = b"CLFT"
VERSION = 1
FEATURE_DIM = 512


class FormatError(ValueError):
    """File is not a parseable CLFT table."""


class IntegrityError(ValueError):
    """File parsed but violates table invariants."""


class FeatureTable:
    """Immutable id -> row map. Rows are float32 [count, dim]."""

    def __init__(self, rows, ids):
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ShapeError(f"rows must be 2-d, got {rows.shape}")
        if len(ids) != rows.shape[0]:
            raise IntegrityError(
                f"{len(ids)} ids for {rows.shape[0]} rows")
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise IntegrityError(f"duplicate ids: {dupes[:5]}")
        if not np.all(np.isfinite(rows)):
            raise IntegrityError("non-finite feature values")
        self.rows = rows
        self.ids = list(ids)
        self._index = {s: i for i, s in enumerate(self.ids)}

    @property
    def count(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    def row(self, item_id):
        return self.rows[self._index[item_id]]

    def __contains__(self, item_id):
        return item_id in self._index

    def missing_ids(self, wanted):
        return [i for i in wanted if i not in self._index]

    def lookup(self, wanted_ids):
        """Rows for the given ids, in order."""
        return self.rows[[self._index[i] for i in wanted_ids]]


def write_table(path, rows, ids):
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise ShapeError(f"rows {rows.shape} do not match {len(ids)} ids")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.astype("<f4").tobytes())
        for s in ids:
            raw = s.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise IntegrityError(f"id longer than 65535 bytes: {s[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)


def read_table(path, normalize=True):
    """Parse and validate; rows are L2-normalized unless disabled."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: header truncated at {len(blob)} bytes")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 16
    need = count * dim * 4
    if len(blob) < off + need:
        raise FormatError(
            f"{path}: row payload truncated ({len(blob) - off} of {need} bytes)")
    rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    rows = rows.reshape(count, dim).copy()
    off += need
    ids = []
    for _ in range(count):
        if len(blob) < off + 2:
            raise FormatError(f"{path}: id block truncated")
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + ln:
            raise FormatError(f"{path}: id bytes truncated")
        ids.append(blob[off:off + ln].decode("utf-8"))
        off += ln
    table = FeatureTable(rows, ids)
    if normalize:
        norms = np.linalg.norm(table.rows, axis=1, keepdims=True)
        table.rows = table.rows / np.maximum(norms, 1e-12)
    return table


def synthetic_features(labels, dim=FEATURE_DIM, class_sep=1.0, noise=0.1,
                       seed=0, ids=None):
    """Stand-in for a pretrained image encoder: one fixed random unit
    direction per class; each row is normalize(dir * class_sep + eps)."""
    if dim < 2:
        raise ShapeError(f"feature dim must be >= 2, got {dim}")
    labels = list(labels)
    if ids is None:
        ids = [str(i) for i in range(len(labels))]
    classes = sorted(set(labels))
    dirs = {}
    for c in classes:
        v = stream(seed, "clipfeat", "dir", c).normal(size=dim)
        dirs[c] = v / np.linalg.norm(v)
    g = stream(seed, "clipfeat", "noise")
    rows = np.zeros((len(labels), dim), dtype=np.float32)
    for i, lab in enumerate(labels):
        v = dirs[lab] * class_sep + g.normal(0.0, noise, size=dim)
        n = np.linalg.norm(v)
        rows[i] = (v / max(n, 1e-12)).astype(np.float32)
    return FeatureTable(rows, ids)


def insert_clip_token(tokens, c0, projection=None):
    """tokens [B, P+1, E] + per-image feature c0 [B, 512] ->
    [B, P+2, E] ordered [CLS, anchor, patches...].

    At E == 512 the feature is inserted directly; otherwise ``projection``
    must be an (w [512, E], b [E]) pair of learnable tensors.
    """
    if c0.shape[-1] != FEATURE_DIM:
        raise ShapeError(
            f"feature dim {c0.shape[-1]} != {FEATURE_DIM}")
    e = tokens.shape[2]
    if e == FEATURE_DIM:
        anchor = c0
    else:
        if projection is None:
            raise ShapeError(
                f"embed dim {e} != {FEATURE_DIM} requires a projection")
        w, b = projection
        anchor = ad.linear(c0, w, b)
    anchor = ad.reshape(anchor, (tokens.shape[0], 1, e))
    head = ad.narrow(tokens, 1, 0, 1)
    tail = ad.narrow(tokens, 1, 1, tokens.shape[1] - 1)
    return ad.concat([head, anchor, tail], axis=1)


class AnchorBank:
    """Per-image trainable anchors, initialized from a feature table.

    Training updates the bank's parameter; the table itself is never
    written back. Lookup order is fixed by the id list given here.
    """

    def __init__(self, table, ids, dtype=np.float32):
        missing = table.missing_ids(ids)
        if missing:
            raise KeyError(f"feature table missing ids: {missing[:5]}"
                           f"{'...' if len(missing) > 5 else ''}")
        self.ids = list(ids)
        self._index = {s: i for i, s in enumerate(self.ids)}
        self.param = ad.parameter(table.lookup(ids).astype(dtype),
                                  name="anchors")

    def gather(self, batch_ids):
        idx = np.array([self._index[i] for i in batch_ids], dtype=np.int64)
        return ad.gather_rows(self.param, idx)
