"""Columnar pages: the unit of data flow between operators, tasks and nodes.

A page is an immutable batch of rows in columnar layout.  Column types are
int64, float64, string and date (stored as int64 days since the Unix epoch).
A page may carry an end marker instead of rows; end pages propagate shutdown
through drivers, tasks and stages.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptPage

INT64 = "int64"
FLOAT64 = "float64"
STRING = "string"
DATE = "date"

COLUMN_TYPES = (INT64, FLOAT64, STRING, DATE)

# Target page sizing: whichever limit is hit first when producing pages.
TARGET_PAGE_ROWS = 4096
TARGET_PAGE_BYTES = 1 << 20

_MAGIC = b"EPG1"
_TYPE_TAGS = {INT64: 0, FLOAT64: 1, STRING: 2, DATE: 3}
_TAG_TYPES = {v: k for k, v in _TYPE_TAGS.items()}


def _as_column(ctype, values):
    if ctype == STRING:
        return list(values)
    if ctype == FLOAT64:
        return np.asarray(values, dtype=np.float64)
    return np.asarray(values, dtype=np.int64)


class Page:
    """A fixed-schema columnar batch of rows with validity bitmaps.

    ``columns[i]`` is a numpy array (numeric types) or a list of str
    (string type); ``valid[i]`` is a boolean numpy array where False marks
    SQL NULL.  Pages are immutable after construction and freely shareable
    between threads.
    """

    __slots__ = ("schema", "columns", "valid", "row_count", "is_end")

    def __init__(self, schema, columns=None, valid=None, is_end=False):
        self.schema = tuple(schema)
        self.is_end = bool(is_end)
        if is_end:
            self.columns = [_as_column(t, []) for t in self.schema]
            self.valid = [np.zeros(0, dtype=bool) for _ in self.schema]
            self.row_count = 0
            return
        assert columns is not None
        self.columns = [_as_column(t, c) for t, c in zip(self.schema, columns)]
        self.row_count = len(self.columns[0]) if self.columns else 0
        if valid is None:
            self.valid = [np.ones(self.row_count, dtype=bool) for _ in self.schema]
        else:
            self.valid = [np.asarray(v, dtype=bool) for v in valid]
        for col, v in zip(self.columns, self.valid):
            assert len(col) == self.row_count and len(v) == self.row_count

    @staticmethod
    def end(schema=()):
        return Page(schema, is_end=True)

    @staticmethod
    def from_rows(schema, rows):
        """Build a page from row tuples; None marks NULL."""
        schema = tuple(schema)
        n = len(rows)
        columns, valid = [], []
        for i, t in enumerate(schema):
            vals = [r[i] for r in rows]
            mask = np.array([v is not None for v in vals], dtype=bool)
            if t == STRING:
                columns.append([v if v is not None else "" for v in vals])
            else:
                fill = 0.0 if t == FLOAT64 else 0
                columns.append(_as_column(t, [v if v is not None else fill for v in vals]))
            valid.append(mask)
        page = Page(schema, columns, valid)
        page.row_count = n
        return page

    def to_rows(self):
        """Materialize row tuples; NULL becomes None. For tests and results."""
        rows = []
        for r in range(self.row_count):
            row = []
            for i, t in enumerate(self.schema):
                if not self.valid[i][r]:
                    row.append(None)
                elif t == STRING:
                    row.append(self.columns[i][r])
                elif t == FLOAT64:
                    row.append(float(self.columns[i][r]))
                else:
                    row.append(int(self.columns[i][r]))
            rows.append(tuple(row))
        return rows

    def take(self, indices):
        """Row subset/reorder by integer index array."""
        indices = np.asarray(indices, dtype=np.int64)
        columns = []
        for t, col in zip(self.schema, self.columns):
            if t == STRING:
                columns.append([col[i] for i in indices])
            else:
                columns.append(col[indices])
        valid = [v[indices] for v in self.valid]
        return Page(self.schema, columns, valid)

    def byte_size(self):
        total = 16
        for t, col in zip(self.schema, self.columns):
            if t == STRING:
                total += sum(len(s) + 4 for s in col)
            else:
                total += col.nbytes
            total += (self.row_count + 7) // 8
        return total

    def __repr__(self):
        if self.is_end:
            return f"Page(end, schema={self.schema})"
        return f"Page(rows={self.row_count}, schema={self.schema})"


# -- engine-wide 64-bit column hash ------------------------------------------
#
# Shuffle partitioning, local exchanges and hash joins on every node must
# agree on row placement, so the hash is a fixed published function over
# canonical little-endian value encodings: a splitmix64-style finalizer for
# numerics and FNV-1a 64 for strings, combined across key columns with the
# same mixer.  NULL keys hash to a fixed value.

_U64 = np.uint64


def _mix64(x):
    x = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        x += _U64(0x9E3779B97F4A7C15)
        x ^= x >> _U64(30)
        x *= _U64(0xBF58476D1CE4E5B9)
        x ^= x >> _U64(27)
        x *= _U64(0x94D049BB133111EB)
        x ^= x >> _U64(31)
    return x


def _fnv1a(s):
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_columns(page, key_indexes):
    """Per-row 64-bit hash over the given key columns.

    Deterministic and identical on every node.  Returns a uint64 array of
    length ``page.row_count``.
    """
    n = page.row_count
    out = np.zeros(n, dtype=np.uint64)
    for idx in key_indexes:
        t = page.schema[idx]
        col = page.columns[idx]
        if t == STRING:
            h = np.fromiter((_fnv1a(s) for s in col), dtype=np.uint64, count=n)
        elif t == FLOAT64:
            h = _mix64(col.view(np.uint64))
        else:
            h = _mix64(col.view(np.uint64))
        h = np.where(page.valid[idx], h, _U64(0x736F6D6570736575))
        with np.errstate(over="ignore"):
            out = _mix64(out ^ h)
    return out


def partition_rows(page, key_indexes, n):
    """hash_partition: split a page into n pages by H(key) mod n.

    Deterministic; the output row multisets partition the input exactly.
    Empty partitions come back as zero-row (non-end) pages.
    """
    assert n >= 1
    if page.is_end:
        raise ValueError("cannot partition an end page")
    if n == 1:
        return [page]
    h = hash_columns(page, key_indexes)
    part = (h % _U64(n)).astype(np.int64)
    return [page.take(np.nonzero(part == p)[0]) for p in range(n)]


def concat_pages(schema, pages):
    rows = []
    for p in pages:
        rows.extend(p.to_rows())
    return Page.from_rows(schema, rows)


# -- wire format -------------------------------------------------------------
#
# Length matters less than bit-exact cross-node stability.  Frame layout:
#   magic(4) | flags(1: bit0=end) | row-count(4 LE) | column-count(4 LE) |
#   per-column [ type-tag(1) | null-bitmap(ceil(n/8)) | data ] | crc32(4 LE)
# Numeric data is packed little-endian 8 bytes per value; strings are
# u32 length + utf-8 bytes each (nulls encode as length 0).


def serialize_page(page):
    parts = [_MAGIC, struct.pack("<BII", 1 if page.is_end else 0, page.row_count, len(page.schema))]
    n = page.row_count
    for i, t in enumerate(page.schema):
        parts.append(struct.pack("<B", _TYPE_TAGS[t]))
        parts.append(np.packbits(page.valid[i], bitorder="little").tobytes())
        col = page.columns[i]
        if t == STRING:
            for s, ok in zip(col, page.valid[i]):
                data = s.encode("utf-8") if ok else b""
                parts.append(struct.pack("<I", len(data)))
                parts.append(data)
        elif t == FLOAT64:
            parts.append(np.asarray(col, dtype="<f8").tobytes())
        else:
            parts.append(np.asarray(col, dtype="<i8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize_page(data):
    if len(data) < 17:
        raise CorruptPage("frame shorter than minimal header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptPage("checksum mismatch")
    if body[:4] != _MAGIC:
        raise CorruptPage("bad magic")
    flags, row_count, col_count = struct.unpack_from("<BII", body, 4)
    off = 13
    schema, columns, valid = [], [], []
    try:
        for _ in range(col_count):
            (tag,) = struct.unpack_from("<B", body, off)
            off += 1
            t = _TAG_TYPES[tag]
            schema.append(t)
            nbytes = (row_count + 7) // 8
            bits = np.frombuffer(body[off:off + nbytes], dtype=np.uint8)
            mask = np.unpackbits(bits, bitorder="little")[:row_count].astype(bool)
            off += nbytes
            if t == STRING:
                col = []
                for _ in range(row_count):
                    (ln,) = struct.unpack_from("<I", body, off)
                    off += 4
                    col.append(body[off:off + ln].decode("utf-8"))
                    off += ln
            elif t == FLOAT64:
                col = np.frombuffer(body[off:off + row_count * 8], dtype="<f8").astype(np.float64)
                off += row_count * 8
            else:
                col = np.frombuffer(body[off:off + row_count * 8], dtype="<i8").astype(np.int64)
                off += row_count * 8
            columns.append(col)
            valid.append(mask)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptPage(f"malformed frame: {exc}") from exc
    if flags & 1:
        return Page.end(schema)
    return Page(schema, columns, valid)


def serialize_frames(pages):
    """Concatenate length-prefixed page frames into one byte stream."""
    out = []
    for p in pages:
        f = serialize_page(p)
        out.append(struct.pack("<I", len(f)))
        out.append(f)
    return b"".join(out)


def deserialize_frames(data):
    pages = []
    off = 0
    while off < len(data):
        if off + 4 > len(data):
            raise CorruptPage("truncated frame stream")
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + ln > len(data):
            raise CorruptPage("truncated frame stream")
        pages.append(deserialize_page(data[off:off + ln]))
        off += ln
    return pages
