"""Serialized block container and the seven physical layouts.

Every image begins with a 19-byte little-endian header::

    "IGB1" | layout u8 | schema hash u64 | rows u32 | cols u16

followed by a layout-specific section. Readers go through :class:`_Reader`
so that :class:`IoStats` reflects the bytes a layout actually touched.
"""

from __future__ import annotations

import datetime as _dt
import enum
import struct
import threading
import zlib
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

from ..core import COMPARATORS, IngestError, Schema, UnknownAttribute

MAGIC = b"IGB1"
HEADER = struct.Struct("<4sBQIH")
_EPOCH_ORDINAL = _dt.date(1970, 1, 1).toordinal()
STRIDE = 64
RCFILE_GROUPS = 4
COLUMN_GROUP_SIZE = 4
ZLIB_ID = 1


class BadMagic(IngestError):
    pass


class SchemaMismatch(IngestError):
    pass


class UnsupportedType(IngestError):
    pass


class UnsupportedLayout(IngestError):
    pass


class Layout(enum.IntEnum):
    STRING_ROWS = 0
    BINARY_ROW = 1
    SORTED_ROW = 2
    PAX = 3
    RCFILE = 4
    COLUMN_GROUP = 5
    COMPRESSED_PAX = 6

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def lookup(cls, name) -> "Layout":
        if isinstance(name, Layout):
            return name
        key = str(name).replace("_", "").replace("-", "").lower()
        try:
            return _ALIASES[key]
        except KeyError:
            raise UnsupportedLayout(f"unknown layout {name!r}") from None


_SHORT = {
    Layout.STRING_ROWS: "str", Layout.BINARY_ROW: "bin", Layout.SORTED_ROW: "srow",
    Layout.PAX: "pax", Layout.RCFILE: "rcf", Layout.COLUMN_GROUP: "cg",
    Layout.COMPRESSED_PAX: "cpax",
}
_ALIASES = {s: l for l, s in _SHORT.items()}
_ALIASES.update({
    "stringrows": Layout.STRING_ROWS, "binaryrow": Layout.BINARY_ROW, "sortedrow": Layout.SORTED_ROW,
    "rcfile": Layout.RCFILE, "rcfilelike": Layout.RCFILE, "columngroup": Layout.COLUMN_GROUP,
    "compressedpax": Layout.COMPRESSED_PAX,
})


@dataclass
class IoStats:
    blocks_opened: int = 0
    bytes_read: int = 0
    rows_emitted: int = 0
    rows_scanned: int = 0
    shuffle_bytes: int = 0

    def add(self, other: "IoStats") -> "IoStats":
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)
        return self

    def as_dict(self) -> dict:
        return asdict(self)


class CodecCounter:
    """Process-wide tally of block encode/decode calls (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.serialize = 0
        self.deserialize = 0

    def bump(self, what: str):
        with self._lock:
            setattr(self, what, getattr(self, what) + 1)

    def snapshot(self) -> tuple[int, int]:
        return self.serialize, self.deserialize


CODEC_CALLS = CodecCounter()


# -- value codecs -------------------------------------------------------------

def date_to_days(d: _dt.date) -> int:
    return d.toordinal() - _EPOCH_ORDINAL


def days_to_date(n: int) -> _dt.date:
    return _dt.date.fromordinal(n + _EPOCH_ORDINAL)


def _check_types(schema: Schema):
    for name, typ in schema.attributes:
        if typ not in ("int64", "float64", "date", "string"):
            raise UnsupportedType(f"{name}: {typ}")


def encode_value(value, typ: str) -> bytes:
    if typ == "int64":
        return struct.pack("<q", value)
    if typ == "float64":
        return struct.pack("<d", value)
    if typ == "date":
        return struct.pack("<q", date_to_days(value))
    if typ == "string":
        raw = value.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw
    raise UnsupportedType(typ)


def decode_value(buf, pos: int, typ: str):
    """Returns (value, new_pos)."""
    if typ == "int64":
        return struct.unpack_from("<q", buf, pos)[0], pos + 8
    if typ == "float64":
        return struct.unpack_from("<d", buf, pos)[0], pos + 8
    if typ == "date":
        return days_to_date(struct.unpack_from("<q", buf, pos)[0]), pos + 8
    if typ == "string":
        (n,) = struct.unpack_from("<I", buf, pos)
        return bytes(buf[pos + 4:pos + 4 + n]).decode("utf-8"), pos + 4 + n
    raise UnsupportedType(typ)


def value_size(value, typ: str) -> int:
    if typ == "string":
        return 4 + len(value.encode("utf-8"))
    return 8


def record_size(row: Sequence, schema: Schema) -> int:
    """BinaryRow-encoded size of one record; the unit the chunkers count."""
    total = 0
    for v, t in zip(row, schema.types):
        total += 4 + len(v.encode("utf-8")) if t == "string" else 8
    return total


def encode_row(row: Sequence, types: Sequence[str]) -> bytes:
    return b"".join(encode_value(v, t) for v, t in zip(row, types))


def decode_row(buf, pos: int, types: Sequence[str]):
    out = []
    for t in types:
        v, pos = decode_value(buf, pos, t)
        out.append(v)
    return tuple(out), pos


def encode_column(values: Sequence, typ: str) -> bytes:
    n = len(values)
    if typ == "int64":
        return struct.pack(f"<{n}q", *values)
    if typ == "float64":
        return struct.pack(f"<{n}d", *values)
    if typ == "date":
        return struct.pack(f"<{n}q", *(date_to_days(v) for v in values))
    if typ == "string":
        parts = []
        for v in values:
            raw = v.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)
    raise UnsupportedType(typ)


def decode_column(buf, n: int, typ: str) -> list:
    if typ == "int64":
        return list(struct.unpack_from(f"<{n}q", buf, 0))
    if typ == "float64":
        return list(struct.unpack_from(f"<{n}d", buf, 0))
    if typ == "date":
        return [days_to_date(d) for d in struct.unpack_from(f"<{n}q", buf, 0)]
    if typ == "string":
        out, pos = [], 0
        for _ in range(n):
            v, pos = decode_value(buf, pos, "string")
            out.append(v)
        return out
    raise UnsupportedType(typ)


def format_value(value, typ: str) -> str:
    if typ == "date":
        return value.isoformat()
    if typ == "float64":
        return repr(float(value))
    return str(value)


def parse_value(text: str, typ: str):
    if typ == "int64":
        return int(text)
    if typ == "float64":
        return float(text)
    if typ == "date":
        return _dt.date.fromisoformat(text)
    return text


# -- selections -----------------------------------------------------------------

def normalize_selection(selection) -> list[tuple[str, str, object]]:
    """Accepts one ``(attr, cmp, value)`` triple or a list of them (conjunction)."""
    if not selection:
        return []
    if isinstance(selection, tuple) and len(selection) == 3 and isinstance(selection[1], str) \
            and selection[1] in COMPARATORS:
        return [selection]
    return [tuple(s) for s in selection]


def compile_selection(selection, schema: Schema):
    conds = [(schema.index(a), COMPARATORS[c], v) for a, c, v in normalize_selection(selection)]
    if not conds:
        return None
    return lambda row: all(cmp(row[i], v) for i, cmp, v in conds)


# -- writers ----------------------------------------------------------------------

def _header(layout: Layout, schema: Schema, rows: int) -> bytes:
    return HEADER.pack(MAGIC, int(layout), schema.hash64, rows, len(schema.attributes))


def _pax_section(rows: Sequence, schema: Schema, base: int) -> bytes:
    ncol = len(schema.attributes)
    cols = list(zip(*rows)) if rows else [()] * ncol
    runs = [encode_column(list(c), t) for c, t in zip(cols, schema.types)]
    pos = base + 16 * ncol
    table = []
    for r in runs:
        table.append(struct.pack("<QQ", pos, len(r)))
        pos += len(r)
    return b"".join(table) + b"".join(runs)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\p").replace("\n", "\\n")


def _unescape(text: str) -> str:
    if "\\" not in text:
        return text
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\":
            nxt = text[i + 1]
            out.append({"p": "|", "n": "\n", "\\": "\\"}[nxt])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _string_rows(rows, schema: Schema) -> bytes:
    lines = ["|".join(_escape(format_value(v, t)) for v, t in zip(r, schema.types)) for r in rows]
    return "\n".join(lines).encode("utf-8")


def serialize_rows(rows: Sequence[tuple], schema: Schema, layout, *, key: Optional[str] = None,
                   group_size: int = COLUMN_GROUP_SIZE, row_groups: int = RCFILE_GROUPS) -> bytes:
    layout = Layout.lookup(layout)
    _check_types(schema)
    CODEC_CALLS.bump("serialize")
    rows = [tuple(r) for r in rows]
    head = _header(layout, schema, len(rows))
    types = schema.types
    if layout is Layout.STRING_ROWS:
        return head + _string_rows(rows, schema)
    if layout is Layout.BINARY_ROW:
        return head + b"".join(encode_row(r, types) for r in rows)
    if layout is Layout.PAX:
        return head + _pax_section(rows, schema, HEADER.size)
    if layout is Layout.COMPRESSED_PAX:
        inner = _pax_section(rows, schema, 0)
        return head + struct.pack("<BQ", ZLIB_ID, len(inner)) + zlib.compress(inner, 6)
    if layout is Layout.SORTED_ROW:
        return head + _sorted_section(rows, schema, key)
    if layout is Layout.RCFILE:
        return head + _rcfile_section(rows, schema, row_groups)
    if layout is Layout.COLUMN_GROUP:
        return head + _column_group_section(rows, schema, group_size)
    raise UnsupportedLayout(layout)


def _sorted_section(rows, schema: Schema, key: Optional[str]) -> bytes:
    # u16 key idx | u32 ordinals[n] | sorted BinaryRow body | stride index | u64 index offset
    kidx = schema.index(key) if key else 0
    ktype = schema.types[kidx]
    order = sorted(range(len(rows)), key=lambda i: rows[i][kidx])
    types = schema.types
    base = HEADER.size + 2 + 4 * len(rows)
    body, offsets, pos = [], [], base
    for i in order:
        enc = encode_row(rows[i], types)
        offsets.append(pos)
        body.append(enc)
        pos += len(enc)
    index_off = pos
    strides = []
    for s, e in _key_aligned_strides([rows[i][kidx] for i in order]):
        chunk = order[s:e]
        first, last = rows[chunk[0]][kidx], rows[chunk[-1]][kidx]
        strides.append(struct.pack("<QI", offsets[s], len(chunk)) + encode_value(first, ktype)
                       + encode_value(last, ktype))
    return (struct.pack("<H", kidx) + struct.pack(f"<{len(order)}I", *order) + b"".join(body)
            + struct.pack("<I", len(strides)) + b"".join(strides) + struct.pack("<Q", index_off))


def _key_aligned_strides(keys: list) -> list[tuple[int, int]]:
    """Split sorted keys into spans of at most STRIDE rows that do not cut a run of
    equal keys, so a point lookup touches one span. A run longer than STRIDE is
    split into full spans."""
    spans, start, i, n = [], 0, 0, len(keys)
    while i < n:
        j = i
        while j < n and keys[j] == keys[i]:
            j += 1
        if j - start > STRIDE and i > start:
            spans.append((start, i))
            start = i
        while j - start > STRIDE:
            spans.append((start, start + STRIDE))
            start += STRIDE
        i = j
    if start < n:
        spans.append((start, n))
    return spans


def _even_splits(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n else 0
    out, start = [], 0
    for g in range(parts):
        size = n // parts + (1 if g < n % parts else 0)
        out.append((start, start + size))
        start += size
    return out


def _rcfile_section(rows, schema: Schema, groups: int) -> bytes:
    # u16 ngroups | per group: u32 rows, u64 offset, u64 length | group bodies
    # group body: per-column (u64 abs offset, u64 len) table then runs
    spans = _even_splits(len(rows), groups)
    ncol = len(schema.attributes)
    pos = HEADER.size + 2 + 20 * len(spans)
    heads, bodies = [], []
    for a, b in spans:
        part = rows[a:b]
        cols = list(zip(*part))
        runs = [encode_column(list(c), t) for c, t in zip(cols, schema.types)]
        run_pos = pos + 16 * ncol
        table = []
        for r in runs:
            table.append(struct.pack("<QQ", run_pos, len(r)))
            run_pos += len(r)
        body = b"".join(table) + b"".join(runs)
        heads.append(struct.pack("<IQQ", b - a, pos, len(body)))
        bodies.append(body)
        pos += len(body)
    return struct.pack("<H", len(spans)) + b"".join(heads) + b"".join(bodies)


def _column_groups(ncol: int, size: int) -> list[list[int]]:
    return [list(range(i, min(i + size, ncol))) for i in range(0, ncol, max(1, size))]


def _column_group_section(rows, schema: Schema, size: int) -> bytes:
    # u16 ngroups | per group: u16 ncols, u16 col ids..., u64 offset, u64 length | row-major group bodies
    groups = _column_groups(len(schema.attributes), size)
    dir_len = 2 + sum(2 + 2 * len(g) + 16 for g in groups)
    pos = HEADER.size + dir_len
    dirs, bodies = [], []
    for g in groups:
        types = [schema.types[i] for i in g]
        body = b"".join(encode_row([r[i] for i in g], types) for r in rows)
        dirs.append(struct.pack(f"<H{len(g)}H", len(g), *g) + struct.pack("<QQ", pos, len(body)))
        bodies.append(body)
        pos += len(body)
    return struct.pack("<H", len(groups)) + b"".join(dirs) + b"".join(bodies)


# -- readers ----------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, stats: IoStats):
        self.view = memoryview(data)
        self.stats = stats

    def read(self, offset: int, length: int) -> memoryview:
        if offset < 0 or offset + length > len(self.view):
            raise BadMagic("truncated block image")
        self.stats.bytes_read += length
        return self.view[offset:offset + length]


@dataclass
class BlockHeader:
    layout: Layout
    schema_hash: int
    rows: int
    cols: int


def read_header(data: bytes) -> BlockHeader:
    if len(data) < HEADER.size:
        raise BadMagic("image shorter than header")
    magic, layout, shash, rows, cols = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        lay = Layout(layout)
    except ValueError:
        raise UnsupportedLayout(f"layout id {layout}") from None
    return BlockHeader(lay, shash, rows, cols)


def deserialize(data: bytes, schema: Schema, projection: Optional[Sequence[str]] = None,
                selection=None, stats: Optional[IoStats] = None) -> list[tuple]:
    """Decode a block image, reading only what the projection/selection require.

    Rows come back in their original order, restricted to ``projection``
    (attribute names, in the requested order) and filtered by ``selection``.
    """
    stats = stats if stats is not None else IoStats()
    CODEC_CALLS.bump("deserialize")
    rd = _Reader(data, stats)
    rd.read(0, HEADER.size)
    hdr = read_header(data)
    stats.blocks_opened += 1
    if hdr.schema_hash != schema.hash64 or hdr.cols != len(schema.attributes):
        raise SchemaMismatch(f"block schema hash {hdr.schema_hash:#x} != {schema.hash64:#x}")
    names = schema.names
    proj = list(names) if projection is None else list(projection)
    for p in proj:
        if p not in names:
            raise UnknownAttribute(p)
    conds = normalize_selection(selection)
    for a, _, _ in conds:
        if a not in names:
            raise UnknownAttribute(a)
    needed = sorted({names.index(p) for p in proj} | {names.index(a) for a, _, _ in conds})
    n = hdr.rows
    reader = _READERS[hdr.layout]
    rows = reader(rd, schema, n, needed, conds)  # tuples, or dicts keyed by column index
    pred = _local_predicate(conds, names)
    out = []
    pidx = [names.index(p) for p in proj]
    for r in rows:
        if pred is None or pred(r):
            out.append(tuple(r[i] for i in pidx))
    stats.rows_emitted += len(out)
    return out


def _local_predicate(conds, names):
    if not conds:
        return None
    cs = [(names.index(a), COMPARATORS[c], v) for a, c, v in conds]
    return lambda row: all(cmp(row[i], v) for i, cmp, v in cs)


def _columns_to_rows(cols: dict[int, list], n: int) -> list:
    keys = list(cols)
    return [{k: cols[k][i] for k in keys} for i in range(n)]


def _read_string_rows(rd: _Reader, schema, n, needed, conds):
    body = bytes(rd.read(HEADER.size, len(rd.view) - HEADER.size)).decode("utf-8")
    lines = body.split("\n") if n else []
    rd.stats.rows_scanned += len(lines)
    types = schema.types
    return [tuple(parse_value(_unescape(f), t) for f, t in zip(line.split("|"), types)) for line in lines]


def _read_binary_row(rd: _Reader, schema, n, needed, conds):
    buf = rd.read(HEADER.size, len(rd.view) - HEADER.size)
    types = schema.types
    out, pos = [], 0
    for _ in range(n):
        row, pos = decode_row(buf, pos, types)
        out.append(row)
    rd.stats.rows_scanned += n
    return out


def _read_pax_table(rd: _Reader, ncol: int, base: int):
    table = rd.read(base, 16 * ncol)
    return [struct.unpack_from("<QQ", table, 16 * i) for i in range(ncol)]


def _read_pax(rd: _Reader, schema, n, needed, conds):
    table = _read_pax_table(rd, len(schema.attributes), HEADER.size)
    cols = {}
    for i in needed:
        off, ln = table[i]
        cols[i] = decode_column(rd.read(off, ln), n, schema.types[i])
    rd.stats.rows_scanned += n
    return _columns_to_rows(cols, n)


def _read_compressed_pax(rd: _Reader, schema, n, needed, conds):
    codec, ulen = struct.unpack_from("<BQ", rd.read(HEADER.size, 9), 0)
    if codec != ZLIB_ID:
        raise UnsupportedLayout(f"compressor id {codec}")
    start = HEADER.size + 9
    inner = zlib.decompress(bytes(rd.read(start, len(rd.view) - start)))
    if len(inner) != ulen:
        raise BadMagic("decompressed length mismatch")
    ncol = len(schema.attributes)
    cols = {}
    for i in needed:
        off, ln = struct.unpack_from("<QQ", inner, 16 * i)
        cols[i] = decode_column(memoryview(inner)[off:off + ln], n, schema.types[i])
    rd.stats.rows_scanned += n
    return _columns_to_rows(cols, n)


def _read_rcfile(rd: _Reader, schema, n, needed, conds):
    (ng,) = struct.unpack_from("<H", rd.read(HEADER.size, 2), 0)
    heads = rd.read(HEADER.size + 2, 20 * ng)
    ncol = len(schema.attributes)
    out = []
    for g in range(ng):
        grows, goff, _ = struct.unpack_from("<IQQ", heads, 20 * g)
        table = _read_pax_table(rd, ncol, goff)
        cols = {}
        for i in needed:
            off, ln = table[i]
            cols[i] = decode_column(rd.read(off, ln), grows, schema.types[i])
        out.extend(_columns_to_rows(cols, grows))
    rd.stats.rows_scanned += n
    return out


def _read_column_group(rd: _Reader, schema, n, needed, conds):
    (ng,) = struct.unpack_from("<H", rd.read(HEADER.size, 2), 0)
    pos = HEADER.size + 2
    groups = []
    for _ in range(ng):
        (k,) = struct.unpack_from("<H", rd.read(pos, 2), 0)
        ids = struct.unpack_from(f"<{k}H", rd.read(pos + 2, 2 * k), 0)
        off, ln = struct.unpack_from("<QQ", rd.read(pos + 2 + 2 * k, 16), 0)
        groups.append((list(ids), off, ln))
        pos += 2 + 2 * k + 16
    want = set(needed)
    rows: list[dict] = [{} for _ in range(n)]
    for ids, off, ln in groups:
        if not want.intersection(ids):
            continue
        buf = rd.read(off, ln)
        types = [schema.types[i] for i in ids]
        p = 0
        for r in rows:
            vals, p = decode_row(buf, p, types)
            for i, v in zip(ids, vals):
                r[i] = v
    rd.stats.rows_scanned += n
    return rows


def _key_bounds(conds, key_name):
    """Interval [lo, hi] (None = open) implied by conjuncts on the sort key."""
    lo = hi = None
    usable = False
    for a, c, v in conds:
        if a != key_name:
            continue
        if c == "=":
            lo = v if lo is None or v > lo else lo
            hi = v if hi is None or v < hi else hi
            usable = True
        elif c in (">", ">="):
            lo = v if lo is None or v > lo else lo
            usable = True
        elif c in ("<", "<="):
            hi = v if hi is None or v < hi else hi
            usable = True
    return usable, lo, hi


def _read_sorted_row(rd: _Reader, schema, n, needed, conds):
    types = schema.types
    (kidx,) = struct.unpack_from("<H", rd.read(HEADER.size, 2), 0)
    ktype = types[kidx]
    (index_off,) = struct.unpack_from("<Q", rd.read(len(rd.view) - 8, 8), 0)
    usable, lo, hi = _key_bounds(conds, schema.names[kidx])
    if not usable:
        ords = struct.unpack_from(f"<{n}I", rd.read(HEADER.size + 2, 4 * n), 0) if n else ()
        body_start = HEADER.size + 2 + 4 * n
        buf = rd.read(body_start, index_off - body_start)
        sorted_rows, pos = [], 0
        for _ in range(n):
            row, pos = decode_row(buf, pos, types)
            sorted_rows.append(row)
        rd.stats.rows_scanned += n
        out = [None] * n
        for r, o in zip(sorted_rows, ords):
            out[o] = r
        return out
    # index access: only strides whose key range can intersect [lo, hi]
    idx = rd.read(index_off, len(rd.view) - 8 - index_off)
    (ns,) = struct.unpack_from("<I", idx, 0)
    pos = 4
    entries = []
    for _ in range(ns):
        off, cnt = struct.unpack_from("<QI", idx, pos)
        first, pos = decode_value(idx, pos + 12, ktype)
        last, pos = decode_value(idx, pos, ktype)
        entries.append((off, cnt, first, last))
    out, start = [], 0
    for s, (off, cnt, first, last) in enumerate(entries):
        row0, start = start, start + cnt
        if (hi is not None and first > hi) or (lo is not None and last < lo):
            continue
        end = entries[s + 1][0] if s + 1 < ns else index_off
        ords = struct.unpack_from(f"<{cnt}I", rd.read(HEADER.size + 2 + 4 * row0, 4 * cnt), 0)
        buf = rd.read(off, end - off)
        p = 0
        for o in ords:
            row, p = decode_row(buf, p, types)
            out.append((o, row))
        rd.stats.rows_scanned += cnt
    out.sort(key=lambda t: t[0])
    return [r for _, r in out]


_READERS = {
    Layout.STRING_ROWS: _read_string_rows,
    Layout.BINARY_ROW: _read_binary_row,
    Layout.PAX: _read_pax,
    Layout.COMPRESSED_PAX: _read_compressed_pax,
    Layout.RCFILE: _read_rcfile,
    Layout.COLUMN_GROUP: _read_column_group,
    Layout.SORTED_ROW: _read_sorted_row,
}


def pax_column_offsets(schema: Schema, rows: Sequence[tuple]) -> list[tuple[int, int]]:
    """Independent (offset, length) calculation for a PAX image."""
    out = []
    pos = HEADER.size + 16 * len(schema.attributes)
    for j, t in enumerate(schema.types):
        ln = sum(value_size(r[j], t) for r in rows)
        out.append((pos, ln))
        pos += ln
    return out
