"""Ingestion-aware access: lineage filenames, replica/block filters, key splits,
pushdown reads, small query operators and plan persistence."""

from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import (Granularity, IngestError, IngestItem, IngestPlan, Materialize, OpSpec, Schema)
from .oplib import layouts as L

SEPARATOR = "_"
_ESCAPE = {"_": "%5F", "/": "%2F", "%": "%25", "|": "%7C", ",": "%2C"}
_NAME_RE = re.compile(r"[^/\x00]+")


class MalformedName(IngestError):
    pass


class UnknownPlan(IngestError):
    pass


class UnknownOperatorName(IngestError):
    pass


class NotPartitionedOnKey(IngestError):
    pass


class IncompatiblePartitioning(IngestError):
    pass


# -- filenames ----------------------------------------------------------------------

def _escape(value: str) -> str:
    out = "".join(_ESCAPE.get(c) or (f"%{ord(c):02X}" if ord(c) < 0x20 or c == "\x7f" else c) for c in value)
    if out.startswith("."):
        out = "%2E" + out[1:]
    return out


def encode_name(values: Sequence) -> str:
    if not values:
        raise MalformedName("a filename needs at least one label")
    return SEPARATOR.join(_escape(str(v)) for v in values)


def decode_name(name: str) -> list[str]:
    if not name or not _NAME_RE.fullmatch(name):
        raise MalformedName(f"bad filename {name!r}")
    out = []
    for seg in name.split(SEPARATOR):
        parts = seg.split("%")
        value = parts[0]
        for p in parts[1:]:
            if len(p) < 2 or not re.fullmatch(r"[0-9A-Fa-f]{2}", p[:2]):
                raise MalformedName(f"bad escape in {name!r}")
            value += chr(int(p[:2], 16)) + p[2:]
        out.append(value)
    return out


def validate_name(name: str) -> None:
    decode_name(name)
    if name.endswith(".tmp") or name in (".", ".."):
        raise MalformedName(f"reserved filename {name!r}")


def lineage_labels(item: IngestItem):
    return sorted(item.sticky_labels, key=lambda l: l.seq)


def lineage_name(item: IngestItem) -> str:
    return encode_name([l.value for l in lineage_labels(item)])


# -- lineage paths -----------------------------------------------------------------------

@dataclass
class NameSlot:
    op_name: str
    kind: str
    constant: Optional[str] = None
    predicates: list = field(default_factory=list)


@dataclass
class LineagePath:
    stages: tuple
    slots: list

    def position(self, op_name: str) -> Optional[int]:
        for i, s in enumerate(self.slots):
            if s.op_name == op_name:
                return i
        return None

    def matches(self, values: Sequence[str], allow_parity: bool = False) -> bool:
        if len(values) != len(self.slots):
            return False
        for v, s in zip(values, self.slots):
            if allow_parity and s.kind == "chunk" and v.startswith("P"):
                continue
            if s.constant is not None and v != s.constant and v != "-1":
                return False
            if not all(p.matches_value(v) for p in s.predicates):
                return False
        return True

    def is_parity(self, values: Sequence[str]) -> bool:
        return any(s.kind == "chunk" and v.startswith("P") for v, s in zip(values, self.slots))


def lineage_paths(plan: IngestPlan) -> list[LineagePath]:
    out = []
    for stages in plan.stage_paths():
        slots = [NameSlot(src, "input") for src in plan.source_labels[:1]]
        g = Granularity.FILE
        ops = []
        preds = defaultdict(list)
        for sname in stages:
            st = plan.stages[sname]
            for p in st.predicates:
                preds[p.op_name].append(p)
            for op in st.ops:
                proto = op.prototype
                g = proto.output_granularity(g)
                if proto.groups or g.is_blockish:
                    ops.append((op, proto))
        for op, proto in sorted(ops, key=lambda t: t[0].seq):
            slots.append(NameSlot(op.name, proto.kind, proto.constant_label(), []))
        for s in slots:
            s.predicates = list(preds.get(s.op_name, ()))
        out.append(LineagePath(tuple(stages), slots))
    return out


def plan_schemas(plan: IngestPlan) -> dict[int, Schema]:
    """Every record schema the plan can emit, keyed by its header hash."""
    from .datagen import TABLES

    found = {s.hash64: s for s in TABLES.values()}
    out_schema: dict[str, Optional[Schema]] = {}
    for name in plan.topo_order():
        st = plan.stages[name]
        sch = out_schema.get(st.upstream[0]) if st.upstream else None
        for op in st.ops:
            try:
                sch = op.prototype.output_schema(sch)
            except IngestError:
                sch = None
            if sch is not None:
                found[sch.hash64] = sch
        out_schema[name] = sch
    return found


# -- datasets and filters -----------------------------------------------------------------

class Dataset:
    """The stored files of one ingestion plan, optionally narrowed by label filters."""

    def __init__(self, cluster, plan: IngestPlan, files: Optional[Iterable[str]] = None,
                 include_parity: bool = False):
        self.cluster = cluster
        self.plan = plan
        self.paths = lineage_paths(plan)
        if files is None:
            files = [sf.name for sf in cluster.list_blocks()]
            files = [f for f in files if self._path_of(f, include_parity) is not None]
        self.files = sorted(files)

    def _path_of(self, name: str, include_parity: bool = False) -> Optional[LineagePath]:
        try:
            values = decode_name(name)
        except MalformedName:
            return None
        for p in self.paths:
            if p.matches(values, allow_parity=include_parity):
                if not include_parity and p.is_parity(values):
                    continue
                return p
        return None

    def label_of(self, name: str, op_name: str) -> Optional[str]:
        p = self._path_of(name, include_parity=True)
        if p is None:
            return None
        i = p.position(op_name)
        return None if i is None else decode_name(name)[i]

    def _check_op(self, op_name: str):
        if not any(p.position(op_name) is not None for p in self.paths):
            raise UnknownOperatorName(f"{op_name!r} does not name the files of plan {self.plan.plan_id!r}")

    def filter_replica(self, op_name: str, value) -> "Dataset":
        self._check_op(op_name)
        keep = [f for f in self.files if self.label_of(f, op_name) == str(value)]
        return Dataset(self.cluster, self.plan, keep)

    filter_block = filter_replica

    def filter_replica_by_layout(self, layout) -> "Dataset":
        short = L.Layout.lookup(layout).short
        keep = [f for f in self.files
                if any(self.label_of(f, op.name) == short for op in self.plan.ops() if op.kind == "serialize")]
        return Dataset(self.cluster, self.plan, keep)

    def filter_replica_by_partitioning(self, op_name: str) -> "Dataset":
        self._check_op(op_name)
        keep = [f for f in self.files if self.label_of(f, op_name) is not None]
        return Dataset(self.cluster, self.plan, keep)

    def __iter__(self):
        return iter(self.files)

    def __len__(self):
        return len(self.files)


def filter_replica(cluster, plan: IngestPlan, op_name: str, value) -> list[str]:
    return Dataset(cluster, plan).filter_replica(op_name, value).files


def filter_block(cluster, plan: IngestPlan, op_name: str, value,
                 within: Optional[Iterable[str]] = None) -> list[str]:
    ds = Dataset(cluster, plan, within) if within is not None else Dataset(cluster, plan)
    return ds.filter_block(op_name, value).files


# -- reading --------------------------------------------------------------------------

def _stripe_lengths(cluster) -> dict[str, int]:
    from .recovery import read_stripes

    cache = getattr(cluster, "_true_lengths", None)
    stamp = _catalog_stamp(cluster)
    if cache is None or cache[0] != stamp:
        lens = {}
        for sd in read_stripes(cluster):
            lens.update(zip(sd.data, sd.lengths))
        cache = (stamp, lens)
        cluster._true_lengths = cache
    return cache[1]


def _catalog_stamp(cluster):
    from .recovery import catalog_path

    p = catalog_path(cluster)
    try:
        st = p.stat()
        return st.st_mtime_ns, st.st_size
    except FileNotFoundError:
        return None


def fetch(cluster, name: str) -> bytes:
    """Stored bytes of ``name`` with erasure-code padding removed."""
    data = cluster.get_block(name)
    true_len = _stripe_lengths(cluster).get(name)
    return data[:true_len] if true_len is not None else data


def schema_for(data: bytes, schemas: dict[int, Schema]) -> Schema:
    hdr = L.read_header(data)
    try:
        return schemas[hdr.schema_hash]
    except KeyError:
        raise L.SchemaMismatch(f"no known schema has hash {hdr.schema_hash:#x}") from None


def deserialize(data: bytes, schema: Schema, projection=None, selection=None,
                stats: Optional[L.IoStats] = None) -> list[tuple]:
    return L.deserialize(data, schema, projection, selection, stats)


def read_records(cluster, plan: IngestPlan, name: str, projection=None, selection=None,
                 stats: Optional[L.IoStats] = None, schemas: Optional[dict] = None) -> list[tuple]:
    data = fetch(cluster, name)
    schema = schema_for(data, schemas or plan_schemas(plan))
    return L.deserialize(data, schema, projection, selection, stats)


def scan_select_project(dataset: Dataset | Sequence, projection=None, selection=None,
                        stats: Optional[L.IoStats] = None, plan: Optional[IngestPlan] = None,
                        cluster=None) -> list[tuple]:
    if isinstance(dataset, Dataset):
        cluster, plan, files = dataset.cluster, dataset.plan, dataset.files
    else:
        files = list(dataset)
    schemas = plan_schemas(plan)
    out = []
    for f in files:
        out.extend(read_records(cluster, plan, f, projection, selection, stats, schemas))
    return out


# -- splits ---------------------------------------------------------------------------

@dataclass
class Split:
    key: str
    members: tuple  # every filename in the split
    parts: tuple = ()  # per-dataset filenames for co-splits
    preferred_node: Optional[str] = None
    size: int = 0


def _partition_op(plan: IngestPlan, key: str) -> OpSpec:
    for op in plan.ops():
        if op.kind == "partition" and op.params.get("key") == key:
            return op
    raise NotPartitionedOnKey(f"plan {plan.plan_id!r} is not partitioned on {key!r}")


def _sort_key(v: str):
    return (0, int(v), "") if v.lstrip("-").isdigit() else (1, 0, v)


def _preferred(cluster, names: Sequence[str]) -> Optional[str]:
    votes = Counter(cluster.holder_of_primary(n) for n in names)
    votes.pop(None, None)
    if not votes:
        return None
    best = max(votes.values())
    return min(n for n, c in votes.items() if c == best)


def _by_partition(ds: Dataset, key: str) -> dict[str, list[str]]:
    op = _partition_op(ds.plan, key)
    groups = defaultdict(list)
    for f in ds.files:
        v = ds.label_of(f, op.name)
        if v is None:
            raise NotPartitionedOnKey(f"{f} carries no {op.name} label")
        groups[v].append(f)
    return groups


def split_by_key(cluster, dataset: Dataset, key: str, max_split_size: Optional[int] = None) -> list[Split]:
    groups = _by_partition(dataset, key)
    out = []
    for v in sorted(groups, key=_sort_key):
        files = sorted(groups[v])
        pieces = [files]
        if max_split_size is not None:
            pieces, cur, size = [], [], 0
            for f in files:
                s = cluster.stat(f).size
                if cur and size + s > max_split_size:
                    pieces.append(cur)
                    cur, size = [], 0
                cur.append(f)
                size += s
            if cur:
                pieces.append(cur)
        for piece in pieces:
            out.append(Split(v, tuple(piece), (tuple(piece),), _preferred(cluster, piece),
                             sum(cluster.stat(f).size for f in piece)))
    return out


def co_split_by_key(cluster, *pairs) -> list[Split]:
    """``pairs`` = (dataset, key), (dataset, key), ...; all must share one partition function."""
    if len(pairs) < 2:
        raise ValueError("co_split_by_key needs at least two (dataset, key) pairs")
    sigs = set()
    for ds, key in pairs:
        op = _partition_op(ds.plan, key)
        sigs.add(op.prototype.arity())
    if len(sigs) != 1:
        raise IncompatiblePartitioning(f"partition functions differ: {sorted(map(str, sigs))}")
    grouped = [_by_partition(ds, key) for ds, key in pairs]
    keys = sorted(set().union(*grouped), key=_sort_key)
    out = []
    for v in keys:
        parts = tuple(tuple(sorted(g.get(v, ()))) for g in grouped)
        members = tuple(f for p in parts for f in p)
        out.append(Split(v, members, parts, _preferred(cluster, members),
                         sum(cluster.stat(f).size for f in members)))
    return out


# -- query operators -----------------------------------------------------------------------

def aggregate_by_key(splits: Sequence[Split], dataset: Dataset, key: str, agg: str = "count",
                     attr: Optional[str] = None, stats: Optional[L.IoStats] = None) -> dict:
    """Per-split local aggregation; splits are key-partitioned, so no repartition is needed."""
    stats = stats if stats is not None else L.IoStats()
    schemas = plan_schemas(dataset.plan)
    cols = [key] + ([attr] if attr else [])
    out = {}
    for sp in splits:
        local = defaultdict(float if agg == "sum" else int)
        for f in sp.parts[0] if sp.parts else sp.members:
            for row in read_records(dataset.cluster, dataset.plan, f, cols, None, stats, schemas):
                if agg == "count":
                    local[row[0]] += 1
                elif agg == "sum":
                    local[row[0]] += row[1]
                else:
                    raise ValueError(f"unknown aggregate {agg!r}")
        for k, v in local.items():
            out[k] = out.get(k, 0) + v
    return out


def hash_join_cogrouped(splits: Sequence[Split], left: Dataset, left_key: str, right: Dataset,
                        right_key: str, left_cols=None, right_cols=None,
                        stats: Optional[L.IoStats] = None) -> list[tuple]:
    """Local hash join inside each co-split, run on the split's preferred node.

    Members not stored on that node would have to be moved there; their bytes are
    counted as ``stats.shuffle_bytes``. Co-located inputs keep it at zero.
    """
    stats = stats if stats is not None else L.IoStats()
    ls, rs = plan_schemas(left.plan), plan_schemas(right.plan)
    out = []
    for sp in splits:
        lfiles, rfiles = sp.parts[0], sp.parts[1]
        for f in sp.members:
            sf = left.cluster.stat(f)
            if sp.preferred_node not in sf.healthy_nodes:
                stats.shuffle_bytes += sf.size
        table = defaultdict(list)
        for f in lfiles:
            data = fetch(left.cluster, f)
            schema = schema_for(data, ls)
            cols = list(left_cols or schema.names)
            proj = cols if left_key in cols else cols + [left_key]
            for row in L.deserialize(data, schema, proj, None, stats):
                table[row[proj.index(left_key)]].append(row[:len(cols)])
        for f in rfiles:
            data = fetch(right.cluster, f)
            schema = schema_for(data, rs)
            cols = list(right_cols or schema.names)
            proj = cols if right_key in cols else cols + [right_key]
            for row in L.deserialize(data, schema, proj, None, stats):
                for lrow in table.get(row[proj.index(right_key)], ()):
                    out.append(lrow + row[:len(cols)])
    return out


def nested_loop_join(left_rows, li: int, right_rows, ri: int) -> list[tuple]:
    return [l + r for l in left_rows for r in right_rows if l[li] == r[ri]]


# -- plan persistence -----------------------------------------------------------------------

def _plans_dir(cluster):
    d = cluster.dfs / "plans"
    d.mkdir(parents=True, exist_ok=True)
    return d


def persist_plan(plan: IngestPlan, cluster) -> str:
    from .lang import render_plan

    chains = {}
    for name, st in plan.stages.items():
        chains[name] = {"chain": [n.name if isinstance(n, OpSpec) else "|" for n in st.chain],
                        "entry_marker": st.entry_marker}
    doc = {"id": plan.plan_id, "version": plan.version, "render": render_plan(plan),
           "manifest": plan.manifest, "env": plan.env, "source_labels": list(plan.source_labels),
           "stages": chains}
    path = _plans_dir(cluster) / f"{plan.plan_id}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    tmp.replace(path)
    return str(path)


def load_plan(cluster, plan_id: str) -> IngestPlan:
    from .lang import compile_text, parse_manifest

    path = cluster.dfs / "plans" / f"{plan_id}.json"
    if not path.exists():
        raise UnknownPlan(plan_id)
    doc = json.loads(path.read_text())
    plan = compile_text(doc["render"], parse_manifest(doc["manifest"]), env=doc["env"],
                        source_labels=tuple(doc["source_labels"]), plan_id=doc["id"])
    plan.version = doc.get("version", plan.version)
    for name, spec in doc["stages"].items():
        st = plan.stages[name]
        by_name = {op.name: op for op in st.ops}
        st.chain = [Materialize() if n == "|" else by_name[n] for n in spec["chain"]]
        st.entry_marker = spec["entry_marker"]
    return plan


def list_plans(cluster) -> list[str]:
    d = cluster.dfs / "plans"
    return sorted(p.stem for p in d.glob("*.json")) if d.exists() else []
