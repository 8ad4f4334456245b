"""Built-in ingestion operators."""

from __future__ import annotations

import math
from collections import OrderedDict, defaultdict
from typing import Optional

from ..core import (COMPARATORS, Granularity, Identity, IngestError, IngestItem, MissingLabel, Operator,
                    Schema, UnknownAttribute, ViolationRecord, fnv1a_64)
from . import layouts as L

G = Granularity
RECORD = frozenset({G.RECORD})
BLOCKISH = frozenset({G.BLOCK, G.SERIALIZED_BLOCK})
PLACEABLE = frozenset({G.BLOCK, G.SERIALIZED_BLOCK})
ANY_DATA = frozenset({G.RECORD, G.BLOCK, G.SERIALIZED_BLOCK})


class SchemaArityMismatch(IngestError):
    pass


class BadK(IngestError):
    pass


class MissingStratumLabel(IngestError):
    pass


class ClusterUnavailable(IngestError):
    pass


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _coerce(value, typ: str):
    if isinstance(value, str) and typ != "string":
        return L.parse_value(value, typ)
    if typ == "float64":
        return float(value)
    if typ == "string":
        return str(value)
    return value


def key_bytes(value, typ: str) -> bytes:
    return L.encode_value(value, typ)


def parse_conditions(text) -> list[tuple[str, str, str]]:
    """``"quantity<3 and discount>=0.05"`` to ``[(attr, cmp, raw value), ...]``."""
    if isinstance(text, (list, tuple)):
        return [tuple(c) for c in text]
    out = []
    for part in str(text).replace("&", " and ").split(" and "):
        part = part.strip()
        if not part:
            continue
        for cmp in ("<=", ">=", "!=", "=", "<", ">"):
            i = part.find(cmp)
            if i > 0:
                out.append((part[:i].strip(), cmp, part[i + len(cmp):].strip().strip("'\"")))
                break
        else:
            raise ValueError(f"cannot parse condition {part!r}")
    return out


def group_of(item: IngestItem, drop_kinds=()):
    return item.group_key(drop_kinds)


def label_of_kind(item: IngestItem, kind: str, op_name: Optional[str] = None) -> Optional[str]:
    if op_name:
        return item.label(op_name)
    for l in reversed(item.labels):
        if l.kind == kind:
            return l.value
    return None


# -- parsing and scoping --------------------------------------------------------

class CsvParse(Operator):
    kind = "parse"
    accepts = frozenset({G.FILE})
    produces = G.RECORD
    positional = ("schema",)

    def _schema(self) -> Schema:
        if "table" in self.params:
            from ..datagen import TABLES
            return TABLES[self.params["table"]]
        spec = self.params.get("schema")
        if isinstance(spec, Schema):
            return spec
        if not spec:
            raise ValueError("csv_parse needs schema= or table=")
        from ..datagen import TABLES
        if spec in TABLES:
            return TABLES[spec]
        return Schema.parse(spec)

    def reset(self):
        self.schema = self._schema()

    def output_schema(self, schema):
        return self._schema()

    def process(self, item):
        payload = item.payload
        text = payload.decode("utf-8") if isinstance(payload, (bytes, bytearray)) else str(payload)
        delim = self.params.get("delimiter", "|")
        types = self.schema.types
        out, bad = [], []
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        arity_ok = False
        for i, line in enumerate(lines):
            fields = line.split(delim)
            try:
                if len(fields) != len(types):
                    raise ValueError(f"expected {len(types)} fields, got {len(fields)}")
                arity_ok = True
                row = tuple(L.parse_value(f, t) for f, t in zip(fields, types))
            except ValueError as exc:
                bad.append(ViolationRecord("parse", (line,), str(exc)))
                continue
            rec = IngestItem(G.RECORD, row, item.labels, self.schema)
            out.append(self.emit(rec, i))
        if lines and not arity_ok:
            # every line has the wrong field count: almost certainly the wrong schema
            raise SchemaArityMismatch(f"no line of the input has the {len(types)} fields of {self.schema.text()}")
        if self.ctx is not None:
            self.ctx.rejects.extend(bad)
        return out


class Filter(Operator):
    kind = "filter"
    accepts = RECORD
    positional = ("predicate",)

    def _conds(self, schema: Schema):
        conds = []
        for attr, cmp, raw in parse_conditions(self.params["predicate"]):
            typ = schema.type_of(attr)
            conds.append((schema.index(attr), COMPARATORS[cmp], _coerce(raw, typ)))
        return conds

    def required_attrs(self):
        return tuple(a for a, _, _ in parse_conditions(self.params["predicate"]))

    def reset(self):
        self._cache = {}

    def process(self, item):
        conds = self._cache.get(item.schema)
        if conds is None:
            conds = self._cache[item.schema] = self._conds(item.schema)
        row = item.payload
        if all(cmp(row[i], v) for i, cmp, v in conds):
            yield self.emit(item, 1)


class Project(Operator):
    kind = "project"
    accepts = RECORD
    positional = ("attrs",)

    @property
    def attrs(self) -> list[str]:
        return _as_list(self.params["attrs"])

    def required_attrs(self):
        return tuple(self.attrs)

    def output_schema(self, schema):
        return None if schema is None else schema.project(self.attrs)

    def reset(self):
        self._cache = {}

    def process(self, item):
        hit = self._cache.get(item.schema)
        if hit is None:
            idx = [item.schema.index(a) for a in self.attrs]
            hit = self._cache[item.schema] = (idx, item.schema.project(self.attrs))
        idx, schema = hit
        row = item.payload
        yield self.emit(item, 1, payload=tuple(row[i] for i in idx), schema=schema)


# -- replication and sampling --------------------------------------------------------

class ReplicateK(Operator):
    kind = "replicate"
    accepts = ANY_DATA
    groups = True
    positional = ("k",)

    def reset(self):
        k = int(self.params.get("k", 3))
        if k < 1:
            raise BadK(f"k must be >= 1, got {k}")
        self.k = k

    def process(self, item):
        return [self.emit(item, i) for i in range(1, self.k + 1)]


class Bernoulli(Operator):
    kind = "sample"
    accepts = ANY_DATA
    groups = True
    positional = ("p",)

    def reset(self):
        self.p = float(self.params.get("p", 0.1))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self._rngs = {}

    def process(self, item):
        g = group_of(item)
        rng = self._rngs.get(g)
        if rng is None:
            rng = self._rngs[g] = self.rng_for(g)
        out = [self.emit(item, 0)]
        if rng.random() < self.p:
            out.append(self.emit(item, 1))
        return out


class Reservoir(Operator):
    """Algorithm R, one reservoir per sticky-label group, emitted at finalize."""

    kind = "sample"
    accepts = ANY_DATA
    groups = True
    stateful = True
    positional = ("capacity",)

    def reset(self):
        self.capacity = int(self.params.get("capacity", 100))
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._state = OrderedDict()

    def process(self, item):
        g = group_of(item)
        st = self._state.get(g)
        if st is None:
            st = self._state[g] = [self.rng_for(g), 0, []]
        rng, seen, res = st
        if seen < self.capacity:
            res.append(item)
        else:
            j = rng.randrange(seen + 1)
            if j < self.capacity:
                res[j] = item
        st[1] = seen + 1
        return ()

    def flush(self):
        for _, (_, _, res) in self._state.items():
            for item in res:
                yield self.emit(item, 1)


def reference_reservoir(items, capacity: int, rng) -> list:
    """Textbook Algorithm R; the oracle the reservoir operator is checked against."""
    res = []
    for n, x in enumerate(items):
        if n < capacity:
            res.append(x)
        else:
            j = rng.randrange(n + 1)
            if j < capacity:
                res[j] = x
    return res


def stratum_quota(rate: float, size: int, min_one: bool = False) -> int:
    k = math.floor(rate * size + 0.5)
    if min_one and size >= 1:
        k = max(k, 1)
    return min(k, size)


class Stratified(Operator):
    """Per-stratum sample of round(rate * size) items without replacement.

    ``scope=local`` samples each source group on its own; ``scope=global``
    needs every item of a stratum in one place, so the runtime shuffles first.
    """

    kind = "sample"
    accepts = ANY_DATA
    groups = True
    stateful = True
    positional = ("rate",)

    def __init__(self, name=None, seq=0, **params):
        super().__init__(name, seq, **params)
        self.global_groups = str(params.get("scope", "local")).lower() == "global"

    def stratum(self, item) -> str:
        v = label_of_kind(item, "partition", self.params.get("by"))
        if v is None:
            raise MissingStratumLabel(f"{self.name}: item has no stratum label")
        return v

    def shuffle_key(self, item) -> str:
        return self.stratum(item)

    def reset(self):
        self.rate = float(self.params.get("rate", 0.1))
        self.min_one = bool(self.params.get("min_one", False))
        self._strata = OrderedDict()

    def process(self, item):
        s = self.stratum(item)
        key = (s,) if self.global_groups else (group_of(item), s)
        self._strata.setdefault(key, []).append(item)
        return ()

    def flush(self):
        for key, items in self._strata.items():
            k = stratum_quota(self.rate, len(items), self.min_one)
            rng = self.rng_for(key)
            keep = sorted(rng.sample(range(len(items)), k))
            for i in keep:
                yield self.emit(items[i], 1)


# -- partitioning ------------------------------------------------------------------

class _Partition(Operator):
    kind = "partition"
    accepts = RECORD
    groups = True
    positional = ("key",)

    def required_attrs(self):
        return (self.params["key"],)

    def reset(self):
        self._cache = {}

    def _index(self, schema: Schema):
        hit = self._cache.get(schema)
        if hit is None:
            key = self.params["key"]
            hit = self._cache[schema] = (schema.index(key), schema.type_of(key))
        return hit

    def pid(self, value, typ: str) -> str:
        raise NotImplementedError

    def arity(self) -> tuple:
        """Identifies the partition function for co-partitioning checks."""
        raise NotImplementedError

    def process(self, item):
        i, typ = self._index(item.schema)
        yield self.emit(item, self.pid(item.payload[i], typ))


class HashPartition(_Partition):
    positional = ("key", "buckets")

    def pid(self, value, typ):
        buckets = int(self.params.get("buckets", 4))
        if buckets < 1:
            raise ValueError("buckets must be >= 1")
        return str(fnv1a_64(key_bytes(value, typ)) % buckets)

    def arity(self):
        return ("hash", int(self.params.get("buckets", 4)))


class RangePartition(_Partition):
    positional = ("key", "boundaries")

    def _bounds(self, typ):
        b = [_coerce(x, typ) for x in _as_list(self.params["boundaries"])]
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("range boundaries must be strictly increasing")
        return b

    def pid(self, value, typ):
        bounds = self._cache.get(("bounds", typ))
        if bounds is None:
            bounds = self._cache[("bounds", typ)] = self._bounds(typ)
        for i, b in enumerate(bounds):
            if b > value:
                return str(i)
        return str(len(bounds))

    def arity(self):
        return ("range", tuple(str(x) for x in _as_list(self.params["boundaries"])))


class ListPartition(_Partition):
    positional = ("key", "lists")

    def pid(self, value, typ):
        for i, group in enumerate(self.params["lists"]):
            members = group if isinstance(group, (list, tuple)) else [group]
            if any(_coerce(m, typ) == value for m in members):
                return str(i)
        return "other"

    def arity(self):
        return ("list", repr(self.params["lists"]))


class BlockSpread(Operator):
    """Deals blocks round-robin over ``n`` replica variants (hybrid layouts)."""

    kind = "spread"
    accepts = BLOCKISH
    groups = True
    positional = ("n",)

    def reset(self):
        self._counters = defaultdict(int)

    def process(self, item):
        g = group_of(item, ("chunk",))
        c = self._counters[g]
        self._counters[g] += 1
        yield self.emit(item, c % int(self.params.get("n", 2)))


# -- chunking and ordering ---------------------------------------------------------

class _Chunker(Operator):
    kind = "chunk"
    accepts = RECORD
    produces = G.BLOCK
    stateful = True

    def reset(self):
        self._open = OrderedDict()  # group -> [index, rows, size, template item, schema]

    def _full(self, state, size) -> bool:
        raise NotImplementedError

    def _block(self, state) -> IngestItem:
        idx, rows, _, tmpl, schema = state
        base = IngestItem(G.BLOCK, tuple(rows), tmpl.sticky_labels, schema)
        return self.emit(base, idx)

    def process(self, item):
        g = group_of(item)
        st = self._open.get(g)
        size = L.record_size(item.payload, item.schema)
        out = []
        if st is None:
            st = self._open[g] = [0, [], 0, item, item.schema]
        elif st[1] and self._full(st, size):
            out.append(self._block(st))
            st[0] += 1
            st[1] = []
            st[2] = 0
        st[1].append(item.payload)
        st[2] += size
        return out

    def flush(self):
        for st in self._open.values():
            if st[1]:
                yield self._block(st)


class ChunkBySize(_Chunker):
    positional = ("max_bytes",)

    def _full(self, st, size):
        return st[2] + size > int(self.params.get("max_bytes", 1 << 20))


class ChunkByRows(_Chunker):
    positional = ("rows",)

    def _full(self, st, size):
        return len(st[1]) >= int(self.params.get("rows", 1000))


class Order(Operator):
    """Record input: blocking sort of the whole stream. Block input: sort within each block."""

    kind = "order"
    accepts = frozenset({G.RECORD, G.BLOCK})
    stateful = True
    positional = ("key",)

    def required_attrs(self):
        return (self.params["key"],)

    def reset(self):
        self._buf = []

    def process(self, item):
        if item.granularity is G.BLOCK:
            i = item.schema.index(self.params["key"])
            rows = tuple(sorted(item.payload, key=lambda r: r[i]))
            return [self.emit(item, 0, payload=rows)]
        self._buf.append(item)
        return ()

    def flush(self):
        if not self._buf:
            return
        i = self._buf[0].schema.index(self.params["key"])
        for n, item in enumerate(sorted(self._buf, key=lambda it: it.payload[i])):
            yield self.emit(item, n)



# -- serialization -------------------------------------------------------------------

class Serializer(Operator):
    kind = "serialize"
    accepts = frozenset({G.BLOCK})
    produces = G.SERIALIZED_BLOCK
    parallel_mode = True
    positional = ("layout",)

    @property
    def layout(self) -> L.Layout:
        return L.Layout.lookup(self.params.get("layout", "pax"))

    def constant_label(self):
        return self.layout.short

    def process(self, item):
        kw = {}
        if self.layout is L.Layout.SORTED_ROW:
            kw["key"] = self.params.get("key") or item.schema.names[0]
        if "group_size" in self.params:
            kw["group_size"] = int(self.params["group_size"])
        data = L.serialize_rows(item.payload, item.schema, self.layout, **kw)
        yield self.emit(item, self.layout.short, payload=data, granularity=G.SERIALIZED_BLOCK)


# -- constraint checking and repair -------------------------------------------------------

class FdDetect(Operator):
    """Flags records whose rhs differs from the plurality rhs of their lhs group."""

    kind = "fd"
    accepts = RECORD
    groups = True
    stateful = True
    global_groups = True
    positional = ("lhs", "rhs")

    def required_attrs(self):
        return (self.params["lhs"], self.params["rhs"])

    def shuffle_key(self, item) -> str:
        if self.params.get("by"):
            v = item.label(self.params["by"])
            if v is None:
                raise MissingLabel(f"{self.name}: no label from {self.params['by']!r}")
            return v
        i = item.schema.index(self.params["lhs"])
        typ = item.schema.types[i]
        return str(fnv1a_64(key_bytes(item.payload[i], typ)) % int(self.params.get("buckets", 16)))

    def reset(self):
        self._groups = OrderedDict()

    def process(self, item):
        i = item.schema.index(self.params["lhs"])
        self._groups.setdefault(item.payload[i], []).append(item)
        return ()

    def flush(self):
        for _, items in self._groups.items():
            j = items[0].schema.index(self.params["rhs"])
            counts = defaultdict(int)
            for it in items:
                counts[it.payload[j]] += 1
            plural = min(counts, key=lambda v: (-counts[v], v))
            bad = [it for it in items if it.payload[j] != plural]
            if bad and self.ctx is not None:
                self.ctx.rejects.extend(
                    ViolationRecord("fd", (it.payload,), f"{self.params['rhs']}={it.payload[j]!r} "
                                    f"differs from plurality {plural!r}") for it in bad)
            for it in items:
                yield self.emit(it, 1 if it.payload[j] != plural else 0)


def fd_plurality_violations(rows, lhs_idx: int, rhs_idx: int) -> set:
    """Brute-force oracle: a record violates when some pair in its lhs group disagrees
    and its rhs is not the plurality value (smallest value wins ties)."""
    groups = defaultdict(list)
    for r in rows:
        groups[r[lhs_idx]].append(r)
    out = set()
    for items in groups.values():
        conflicted = set()
        for a in items:
            for b in items:
                if a[rhs_idx] != b[rhs_idx]:
                    conflicted.add(a[rhs_idx])
        if not conflicted:
            continue
        counts = defaultdict(int)
        for r in items:
            counts[r[rhs_idx]] += 1
        best = max(counts.values())
        plural = min(v for v, c in counts.items() if c == best)
        out.update(r for r in items if r[rhs_idx] != plural)
    return out


class DcDetect(Operator):
    """``quantity < max_qty and discount > max_disc`` marks a denial-constraint violation."""

    kind = "dc"
    accepts = RECORD
    groups = True

    def required_attrs(self):
        return (self.params.get("qty", "quantity"), self.params.get("disc", "discount"))

    def reset(self):
        self.max_qty = self.params.get("max_qty", 3)
        self.max_disc = float(self.params.get("max_disc", 0.09))

    def violates(self, row, schema) -> bool:
        q = row[schema.index(self.params.get("qty", "quantity"))]
        d = row[schema.index(self.params.get("disc", "discount"))]
        return q < self.max_qty and d > self.max_disc

    def process(self, item):
        bad = self.violates(item.payload, item.schema)
        if bad and self.ctx is not None:
            self.ctx.rejects.append(ViolationRecord("dc", (item.payload,), "quantity/discount rule"))
        yield self.emit(item, 1 if bad else 0)


class DcRepair(DcDetect):
    """Clamps the discount of violating records to the rule's maximum."""

    kind = "repair"
    groups = False

    def process(self, item):
        if not self.violates(item.payload, item.schema):
            yield self.emit(item, 0)
            return
        j = item.schema.index(self.params.get("disc", "discount"))
        row = list(item.payload)
        row[j] = self.max_disc
        yield self.emit(item, 1, payload=tuple(row))


class SinglePassRepair(Operator):
    kind = "repair"
    accepts = RECORD
    positional = ("attr",)

    def required_attrs(self):
        return (self.params["attr"],)

    def reset(self):
        self.dictionary = dict(self.params.get("dictionary") or {})
        valid = self.params.get("valid")
        self.valid = set(_as_list(valid)) if valid is not None else None

    def is_valid(self, value) -> bool:
        if self.valid is not None:
            return value in self.valid
        return value not in self.dictionary

    def process(self, item):
        j = item.schema.index(self.params["attr"])
        value = item.payload[j]
        if self.is_valid(value):
            yield self.emit(item, 0)
            return
        fixed = self.dictionary.get(value)
        if fixed is None:
            if self.ctx is not None:
                self.ctx.rejects.append(ViolationRecord("repair", (item.payload,), f"no repair for {value!r}"))
            return
        row = list(item.payload)
        row[j] = fixed
        yield self.emit(item, 1, payload=tuple(row))


# -- location -----------------------------------------------------------------------------

NAME_NEUTRAL_KINDS = ("replicate", "serialize", "locate", "upload", "spread")


class RandomLocator(Operator):
    kind = "locate"
    accepts = PLACEABLE
    positional = ("n_locations",)

    def reset(self):
        self._rngs = {}

    def process(self, item):
        g = group_of(item)
        rng = self._rngs.get(g)
        if rng is None:
            rng = self._rngs[g] = self.rng_for(g)
        yield self.emit(item, rng.randrange(int(self.params.get("n_locations", 16))))


class CoLocator(Operator):
    kind = "locate"
    accepts = PLACEABLE

    def process(self, item):
        pid = label_of_kind(item, "partition", self.params.get("by"))
        if pid is None:
            raise MissingLabel(f"{self.name}: block has no partition label")
        loc = int(pid) if pid.lstrip("-").isdigit() else fnv1a_64(pid.encode()) % 1024
        yield self.emit(item, loc)


class DisjointLocator(Operator):
    """Replicas of one logical block go to pairwise distinct location ids."""

    kind = "locate"
    accepts = PLACEABLE
    stateful = True
    positional = ("n_locations",)

    def reset(self):
        self._blocks = OrderedDict()

    def block_key(self, item):
        return group_of(item, NAME_NEUTRAL_KINDS)

    def process(self, item):
        if not any(l.kind == "replicate" for l in item.labels):
            raise MissingLabel(f"{self.name}: block has no replica label")
        self._blocks.setdefault(self.block_key(item), []).append(item)
        return ()

    def flush(self):
        n = int(self.params.get("n_locations", 16))
        for key, items in self._blocks.items():
            base = fnv1a_64(repr(key).encode()) % n
            ordered = sorted(items, key=lambda it: it.group_key())
            for i, it in enumerate(ordered):
                yield self.emit(it, (base + i) % n)


# -- storage -------------------------------------------------------------------------------

def ensure_serialized(item: IngestItem) -> bytes:
    if item.granularity is G.SERIALIZED_BLOCK:
        return item.payload
    if item.granularity is G.BLOCK:
        return L.serialize_rows(item.payload, item.schema, L.Layout.STRING_ROWS)
    raise ValueError(f"cannot store a {item.granularity.value} item")


def location_of(item: IngestItem) -> Optional[int]:
    v = label_of_kind(item, "locate")
    return int(v) if v is not None and v.lstrip("-").isdigit() else None


class DfsStore(Operator):
    kind = "upload"
    accepts = PLACEABLE
    positional = ("replication",)

    def constant_label(self):
        return str(self.params.get("id", "0"))

    def _cluster(self):
        cl = self.ctx.cluster if self.ctx is not None else None
        if cl is None:
            raise ClusterUnavailable(f"{self.name}: no cluster bound")
        return cl

    def replication_for(self, item) -> int:
        if any(l.kind == "replicate" for l in item.labels):
            return 1
        r = self.params.get("replication")
        if r is None:
            r = self.ctx.env.get("default_replication") if self.ctx is not None else None
        if r is None:
            r = getattr(self._cluster(), "default_replication", 3)
        return int(r)

    def store(self, item: IngestItem, data: bytes, replication: int,
              location: Optional[int], record: dict | None = None):
        from ..access import lineage_name

        name = lineage_name(item)
        sf = self._cluster().put_block(name, data, replication, location)
        if self.ctx is not None:
            entry = {"name": name, "size": sf.size, "digest": sf.digest, "nodes": list(sf.nodes)}
            if record:
                entry.update(record)
            self.ctx.manifest.append(entry)
        return sf

    def process(self, item):
        data = ensure_serialized(item)
        out = self.emit(item, self.constant_label(), payload=data, granularity=G.SERIALIZED_BLOCK)
        self.store(out, data, self.replication_for(item), location_of(item))
        yield out


class EcStore(DfsStore):
    """Stripes each block group (k data + m Reed-Solomon parity) and records the stripe catalog."""

    stateful = True
    positional = ("k", "m")

    def reset(self):
        self._groups = OrderedDict()

    def process(self, item):
        out = self.emit(item, self.constant_label(), payload=ensure_serialized(item),
                        granularity=G.SERIALIZED_BLOCK)
        self._groups.setdefault(group_of(item, ("chunk", "locate")), []).append(out)
        return ()

    def flush(self):
        from ..access import lineage_name
        from ..recovery import StripeDescriptor, append_stripe
        from ..erasure import rs_encode

        k = int(self.params.get("k", 10))
        m = int(self.params.get("m", 3))
        cl = self._cluster()
        for gkey, items in self._groups.items():
            items.sort(key=lambda it: _chunk_index(it))
            gtag = "%016x" % fnv1a_64(repr(gkey).encode())
            for sno, start in enumerate(range(0, len(items), k)):
                members = items[start:start + k]
                lens = [len(it.payload) for it in members]
                width = max(lens)
                padded = [it.payload + bytes(width - len(it.payload)) for it in members]
                parity = rs_encode(padded, m)
                names = []
                for i, (it, data) in enumerate(zip(members, padded)):
                    self.store(it, data, 1, sno + i, {"stripe": f"{gtag}-{sno}", "true_size": lens[i]})
                    names.append(lineage_name(it))
                pnames = []
                for i, pdata in enumerate(parity):
                    pname = _parity_name(names[0], members[0], f"P{sno}.{i}")
                    sf = cl.put_block(pname, pdata, 1, sno + len(members) + i)
                    if self.ctx is not None:
                        self.ctx.manifest.append({"name": pname, "size": sf.size, "digest": sf.digest,
                                                  "nodes": list(sf.nodes), "stripe": f"{gtag}-{sno}",
                                                  "parity": True})
                    pnames.append(pname)
                append_stripe(cl, StripeDescriptor(f"{gtag}-{sno}", tuple(names), tuple(pnames), width,
                                                   tuple(lens)))
                yield from members


def _chunk_index(item):
    v = label_of_kind(item, "chunk")
    return int(v) if v is not None and v.isdigit() else -1


def _parity_name(data_name: str, item: IngestItem, tag: str) -> str:
    from ..access import encode_name, decode_name

    values = decode_name(data_name)
    ordered = sorted(item.sticky_labels, key=lambda l: l.seq)
    for i, l in enumerate(ordered):
        if l.kind == "chunk":
            values[i] = tag
            return encode_name(values)
    return encode_name(values + [tag])


# -- registry of builtin ids -----------------------------------------------------------------

BUILTINS = {
    "identity": Identity,
    "csv_parse": CsvParse,
    "filter": Filter,
    "project": Project,
    "replicate_k": ReplicateK,
    "bernoulli": Bernoulli,
    "reservoir": Reservoir,
    "stratified": Stratified,
    "hash_partition": HashPartition,
    "range_partition": RangePartition,
    "list_partition": ListPartition,
    "block_spread": BlockSpread,
    "chunk_by_size": ChunkBySize,
    "chunk_by_rows": ChunkByRows,
    "order": Order,
    "serialize": Serializer,
    "fd_detect": FdDetect,
    "dc_detect": DcDetect,
    "dc_repair": DcRepair,
    "single_pass_repair": SinglePassRepair,
    "random_locator": RandomLocator,
    "colocate_locator": CoLocator,
    "disjoint_locator": DisjointLocator,
    "dfs_store": DfsStore,
    "ec_store": EcStore,
}

# short aliases usable directly in programs, e.g. ``CHUNK BY chunk(1024)``
ALIASES = {
    "parse": "csv_parse", "replicate": "replicate_k", "hash": "hash_partition",
    "range": "range_partition", "list": "list_partition", "chunk": "chunk_by_size",
    "chunk_rows": "chunk_by_rows", "sort": "order", "upload": "dfs_store",
    "str": ("serialize", "str"), "bin": ("serialize", "bin"), "srow": ("serialize", "srow"),
    "pax": ("serialize", "pax"), "rcf": ("serialize", "rcf"), "cg": ("serialize", "cg"),
    "cpax": ("serialize", "cpax"),
}

# operators a replicator may be moved past without changing the stored bytes
COMMUTES_WITH_REPLICATE = frozenset({"chunk", "order", "serialize", "partition", "filter", "project"})
