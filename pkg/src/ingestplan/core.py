"""Ingest data items, labels, the operator iterator contract and plan DAG types."""

from __future__ import annotations

import enum
import functools
import hashlib
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, NamedTuple, Optional, Sequence

PRIMITIVE_TYPES = ("int64", "float64", "date", "string")

SKIPPED = "-1"  # label value of a dummy pass-through substituted for a failing operator


class IngestError(Exception):
    """Base class of every error raised by the engine."""


class GranularityMismatch(IngestError):
    pass


class OperatorFailure(IngestError):
    def __init__(self, op_name: str, cause: BaseException | str):
        super().__init__(f"operator {op_name!r} failed: {cause}")
        self.op_name = op_name
        self.cause = cause


class DuplicateLabel(IngestError):
    pass


class UnknownAttribute(IngestError):
    pass


class MissingLabel(IngestError):
    pass


@functools.total_ordering
class Granularity(enum.Enum):
    FILE = "File"
    RECORD = "Record"
    BLOCK = "Block"
    SERIALIZED_BLOCK = "SerializedBlock"

    @property
    def coarseness(self) -> int:
        return _COARSENESS[self]

    @property
    def is_blockish(self) -> bool:
        return self in (Granularity.BLOCK, Granularity.SERIALIZED_BLOCK)

    @property
    def family(self) -> str:
        # serialization keeps the granularity but changes the representation
        return "block" if self.is_blockish else self.value.lower()

    def __lt__(self, other):
        if not isinstance(other, Granularity):
            return NotImplemented
        return self.coarseness < other.coarseness


_COARSENESS = {
    Granularity.RECORD: 0,
    Granularity.SERIALIZED_BLOCK: 1,
    Granularity.BLOCK: 1,
    Granularity.FILE: 2,
}


class Label(NamedTuple):
    """One lineage tag. ``seq`` orders labels inside filenames; ``sticky`` labels
    survive materialization into blocks and form the stored file's name."""

    op_name: str
    value: str
    seq: int = 0
    sticky: bool = False
    kind: str = ""


@dataclass(frozen=True)
class Schema:
    attributes: tuple[tuple[str, str], ...]
    key: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("schema needs at least one attribute")
        names = [a for a, _ in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in {names}")
        for name, typ in self.attributes:
            if typ not in PRIMITIVE_TYPES:
                raise ValueError(f"unsupported type {typ!r} for {name!r}")

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Build from ``"a:int64,b:string"``."""
        attrs = []
        for part in text.split(","):
            name, _, typ = part.strip().partition(":")
            attrs.append((name.strip(), typ.strip() or "string"))
        return cls(tuple(attrs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.attributes)

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(t for _, t in self.attributes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownAttribute(f"{name!r} not in schema {self.names}") from None

    def type_of(self, name: str) -> str:
        return self.attributes[self.index(name)][1]

    def project(self, names: Sequence[str]) -> "Schema":
        return Schema(tuple(self.attributes[self.index(n)] for n in names))

    def text(self) -> str:
        return ",".join(f"{a}:{t}" for a, t in self.attributes)

    @functools.cached_property
    def hash64(self) -> int:
        return fnv1a_64(self.text().encode())


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def derive_rng(seed: int, *parts: Any) -> random.Random:
    """Independent, reproducible RNG stream for ``(seed, parts...)``."""
    digest = hashlib.blake2b(repr((seed,) + parts).encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


class IngestItem:
    """Immutable labelled unit of data."""

    __slots__ = ("granularity", "payload", "labels", "schema")

    def __init__(self, granularity: Granularity, payload: Any, labels: tuple[Label, ...] = (),
                 schema: Optional[Schema] = None):
        object.__setattr__(self, "granularity", granularity)
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "schema", schema)

    def __setattr__(self, key, value):
        raise AttributeError("IngestItem is immutable")

    def __reduce__(self):
        return (IngestItem, (self.granularity, self.payload, self.labels, self.schema))

    def __repr__(self):
        labels = ",".join(f"{l.op_name}={l.value}" for l in self.labels)
        return f"IngestItem({self.granularity.value}, {self.payload!r:.60}, [{labels}])"

    def __eq__(self, other):
        if not isinstance(other, IngestItem):
            return NotImplemented
        return (self.granularity, self.payload, self.labels, self.schema) == (
            other.granularity, other.payload, other.labels, other.schema)

    def __hash__(self):
        return hash((self.granularity, self.payload, self.labels))

    def label(self, op_name: str) -> Optional[str]:
        for l in self.labels:
            if l.op_name == op_name:
                return l.value
        return None

    def with_payload(self, payload, granularity: Optional[Granularity] = None,
                     schema: Optional[Schema] = None, labels: Optional[tuple[Label, ...]] = None) -> "IngestItem":
        return IngestItem(granularity or self.granularity, payload,
                          self.labels if labels is None else labels,
                          self.schema if schema is None else schema)

    @property
    def sticky_labels(self) -> tuple[Label, ...]:
        return tuple(l for l in self.labels if l.sticky)

    def group_key(self, drop_kinds: Iterable[str] = ()) -> tuple[tuple[str, str], ...]:
        """Order-independent identity of the item's sticky lineage."""
        drop = set(drop_kinds)
        return tuple((l.op_name, l.value) for l in sorted(self.sticky_labels, key=lambda l: l.seq)
                     if l.kind not in drop)


def attach_label(item: IngestItem, op_name: str, value: Any, *, seq: int = 0,
                 sticky: bool = False, kind: str = "") -> IngestItem:
    if any(l.op_name == op_name for l in item.labels):
        raise DuplicateLabel(f"item already labelled by {op_name!r}")
    label = Label(op_name, str(value), seq, sticky, kind)
    return IngestItem(item.granularity, item.payload, item.labels + (label,), item.schema)


def get_label(item: IngestItem, op_name: str) -> Optional[str]:
    return item.label(op_name)


@dataclass(frozen=True)
class ViolationRecord:
    rule: str
    records: tuple
    reason: str


@dataclass
class Context:
    """Per-node execution context handed to operators at ``initialize``."""

    seed: int = 0
    node: str = "node-0"
    cluster: Any = None
    rejects: list = field(default_factory=list)
    manifest: list = field(default_factory=list)
    env: dict = field(default_factory=dict)


class Operator:
    """Iterator-model ingestion operator.

    Subclasses implement :meth:`process` (one input item to zero or more output
    items) and optionally :meth:`flush` for outputs that only exist once the
    input is exhausted.
    """

    kind = "op"
    accepts: frozenset = frozenset(Granularity)
    produces: Optional[Granularity] = None  # None keeps the input granularity
    parallel_mode = False
    stateful = False
    groups = False
    global_groups = False
    positional: tuple[str, ...] = ()

    def __init__(self, name: Optional[str] = None, seq: int = 0, **params):
        self.name = name or self.kind
        self.seq = seq
        self.params = params
        self.ctx: Optional[Context] = None
        self._source: Optional[Iterator[IngestItem]] = None
        self._pending: deque = deque()
        self._exhausted = True

    # -- lifecycle --------------------------------------------------------
    def initialize(self, ctx: Optional[Context] = None) -> None:
        self.ctx = ctx if ctx is not None else Context()

    def set_input(self, items: Iterable[IngestItem]) -> None:
        if self.ctx is None:
            self.initialize()
        self._source = iter(items)
        self._pending = deque()
        self._exhausted = False
        self.reset()

    def has_next(self) -> bool:
        while not self._pending:
            if self._exhausted:
                return False
            try:
                item = next(self._source)
            except StopIteration:
                self._exhausted = True
                return False
            if item.granularity not in self.accepts:
                raise GranularityMismatch(
                    f"{self.name} accepts {sorted(g.value for g in self.accepts)}, got {item.granularity.value}")
            self._pending.extend(self.process(item))
        return True

    def next(self) -> IngestItem:
        if not self.has_next():
            raise IngestError(f"next() called on exhausted operator {self.name!r}")
        return self._pending.popleft()

    def finalize(self) -> list[IngestItem]:
        """End the epoch; returns the trailing outputs of blocking operators."""
        if self.has_next():
            raise IngestError(f"finalize() on {self.name!r} before its input was drained")
        return list(self.flush())

    # -- hooks ------------------------------------------------------------
    def reset(self) -> None:
        pass

    def process(self, item: IngestItem) -> Iterable[IngestItem]:
        raise NotImplementedError

    def flush(self) -> Iterable[IngestItem]:
        return ()

    def output_granularity(self, granularity: Granularity) -> Granularity:
        return self.produces or granularity

    def output_schema(self, schema: Optional[Schema]) -> Optional[Schema]:
        return schema

    def required_attrs(self) -> tuple[str, ...]:
        return ()

    def constant_label(self) -> Optional[str]:
        """Label value this operator always assigns, if it is fixed."""
        return None

    # -- helpers ----------------------------------------------------------
    def emit(self, item: IngestItem, value: Any, *, payload: Any = None,
             granularity: Optional[Granularity] = None, schema: Optional[Schema] = None,
             labels: Optional[tuple[Label, ...]] = None) -> IngestItem:
        g = granularity or item.granularity
        sticky = self.groups or g.is_blockish
        base = item.labels if labels is None else labels
        if any(l.op_name == self.name for l in base):
            raise DuplicateLabel(f"item already labelled by {self.name!r}")
        label = Label(self.name, str(value), self.seq, sticky, self.kind)
        return IngestItem(g, item.payload if payload is None else payload, base + (label,),
                          item.schema if schema is None else schema)

    def rng_for(self, *parts) -> random.Random:
        seed = self.params.get("seed")
        if seed is None:
            seed = self.ctx.seed if self.ctx is not None else 0
        return derive_rng(int(seed), self.name, *parts)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Identity(Operator):
    kind = "identity"

    def process(self, item):
        yield self.emit(item, self._counter_next())

    def reset(self):
        self._count = 0

    def _counter_next(self):
        n = self._count
        self._count += 1
        return n


class DummyPassThrough(Operator):
    """Stand-in for an operator that kept failing: forwards inputs labelled -1."""

    kind = "dummy"

    def __init__(self, replaced: Operator):
        super().__init__(replaced.name, replaced.seq)
        self.kind = replaced.kind
        self.accepts = replaced.accepts
        self.groups = replaced.groups

    def process(self, item):
        yield self.emit(item, SKIPPED)


def drain_operator(op: Operator, inputs: Iterable[IngestItem]) -> list[IngestItem]:
    inputs = list(inputs)
    for item in inputs:
        if item.granularity not in op.accepts:
            raise GranularityMismatch(f"{op.name} cannot consume {item.granularity.value} items")
    op.set_input(inputs)
    out = []
    try:
        while op.has_next():
            out.append(op.next())
        out.extend(op.finalize())
    except (GranularityMismatch, OperatorFailure):
        raise
    except Exception as exc:
        raise OperatorFailure(op.name, exc) from exc
    return out


def validate_chain(ops: Sequence[Operator], input_granularity: Optional[Granularity] = None,
                   schema: Optional[Schema] = None) -> list[str]:
    """Empty list when consecutive operators line up; otherwise one message per bad pair."""
    if not ops:
        raise ValueError("validate_chain needs at least one operator")
    violations = []
    g = input_granularity
    if g is not None and g not in ops[0].accepts:
        violations.append(f"input ({g.value}) -> 1 ({ops[0].name}): accepts "
                          f"{sorted(a.value for a in ops[0].accepts)}")
    if g is None or g not in ops[0].accepts:
        g = _default_input(ops[0])
    for i, op in enumerate(ops):
        if i > 0 and g not in op.accepts:
            violations.append(f"pair ({i},{i + 1}) {ops[i - 1].name}->{op.name}: "
                              f"{g.value} not in {sorted(a.value for a in op.accepts)}")
        if schema is not None:
            missing = [a for a in op.required_attrs() if a not in schema.names]
            if missing:
                where = f"pair ({i},{i + 1})" if i else "input -> 1"
                violations.append(f"{where} {op.name}: unknown attributes {missing}")
        g = op.output_granularity(g)
        try:
            schema = op.output_schema(schema)
        except UnknownAttribute:
            schema = None
    return violations


def _default_input(op: Operator) -> Granularity:
    if len(op.accepts) == 1:
        return next(iter(op.accepts))
    for g in (Granularity.RECORD, Granularity.BLOCK, Granularity.SERIALIZED_BLOCK, Granularity.FILE):
        if g in op.accepts:
            return g
    raise GranularityMismatch(f"{op.name} accepts nothing")


# --------------------------------------------------------------------------
# plan DAG types


class Materialize:
    """Marker: collect every item before the next operator runs."""

    name = "materialize"
    kind = "materialize"

    def __repr__(self):
        return "M"

    def __eq__(self, other):
        return isinstance(other, Materialize)

    def __hash__(self):
        return hash("materialize")


@dataclass
class OpSpec:
    name: str
    kind: str
    builtin: str
    params: dict
    seq: int
    ref_text: str = ""
    statement: str = ""

    def instantiate(self, ctx: Optional[Context] = None) -> Operator:
        from .oplib import BUILTINS

        op = BUILTINS[self.builtin](name=self.name, seq=self.seq, **self.params)
        if ctx is not None:
            op.initialize(ctx)
        return op

    @functools.cached_property
    def prototype(self) -> Operator:
        return self.instantiate()

    def __repr__(self):
        return self.name


COMPARATORS: dict[str, Callable[[Any, Any], bool]] = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


@dataclass
class Predicate:
    """``l_<op_name> <cmp> <value>`` over a label."""

    op_name: str
    cmp: str
    value: Any  # int compares numerically, str lexically
    raw: str = ""

    def matches(self, item: IngestItem) -> bool:
        return self.matches_value(item.label(self.op_name))

    def matches_value(self, label: Optional[str]) -> bool:
        if label is None:
            return False
        if isinstance(self.value, int):
            try:
                lhs = int(label)
            except ValueError:
                return self.cmp == "!="
            return COMPARATORS[self.cmp](lhs, self.value)
        return COMPARATORS[self.cmp](label, str(self.value))

    def __str__(self):
        return self.raw or f"l_{self.op_name}{self.cmp}{self.value}"


ChainNode = "OpSpec | Materialize"


@dataclass
class Stage:
    name: str
    chain: list
    predicates: list = field(default_factory=list)
    upstream: list = field(default_factory=list)
    uses: list = field(default_factory=list)
    entry_marker: bool = False

    @property
    def ops(self) -> list[OpSpec]:
        return [n for n in self.chain if isinstance(n, OpSpec)]

    @property
    def is_source(self) -> bool:
        return not self.upstream


@dataclass
class OpExpr:
    """A plan subtree: ``node`` plus the subplans producing its input."""

    node: Any
    children: list
    stage: str
    index: int  # position in the stage chain; -1 for the stage entry marker

    def walk(self) -> Iterator["OpExpr"]:
        seen = set()
        stack = [self]
        while stack:
            e = stack.pop()
            key = (e.stage, e.index)
            if key in seen:
                continue
            seen.add(key)
            yield e
            stack.extend(reversed(e.children))


@dataclass
class IngestPlan:
    stages: dict
    program: Any = None  # parsed Program the plan came from
    manifest: str = ""
    env: dict = field(default_factory=dict)
    source_labels: tuple = ("input",)
    plan_id: str = "plan"
    version: str = "1"

    # -- structure --------------------------------------------------------
    def topo_order(self) -> list[str]:
        indeg = {n: len(s.upstream) for n, s in self.stages.items()}
        order, ready = [], [n for n in self.stages if indeg[n] == 0]
        while ready:
            n = ready.pop(0)
            order.append(n)
            for m in self.downstream(n):
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
        return order

    def downstream(self, name: str) -> list[str]:
        return [n for n, s in self.stages.items() if name in s.upstream]

    def ancestors(self, name: str) -> list[str]:
        out, todo = [], list(self.stages[name].upstream)
        while todo:
            n = todo.pop()
            if n not in out:
                out.append(n)
                todo.extend(self.stages[n].upstream)
        return out

    def sinks(self) -> list[str]:
        return [n for n in self.stages if not self.downstream(n)]

    def ops(self) -> list[OpSpec]:
        return [op for n in self.topo_order() for op in self.stages[n].ops]

    def op(self, name: str) -> OpSpec:
        for op in self.ops():
            if op.name == name:
                return op
        raise KeyError(name)

    def stage_paths(self) -> list[list[str]]:
        """Every source-to-sink stage path."""
        paths = []

        def extend(path):
            nxt = self.downstream(path[-1])
            if not nxt:
                paths.append(path)
            for n in nxt:
                extend(path + [n])

        for s in self.topo_order():
            if self.stages[s].is_source:
                extend([s])
        return paths

    def expressions(self) -> list[OpExpr]:
        """Expression DAG roots (one per sink stage); shared subplans are shared objects."""
        memo: dict = {}

        def node_at(stage_name: str, index: int) -> Optional[OpExpr]:
            key = (stage_name, index)
            if key in memo:
                return memo[key]
            stage = self.stages[stage_name]
            if index >= 0:
                children = []
                below = node_at(stage_name, index - 1) if index > 0 else entry(stage_name)
                if isinstance(below, list):
                    children = below
                elif below is not None:
                    children = [below]
                expr = OpExpr(stage.chain[index], children, stage_name, index)
            else:
                feeds = [tail(u) for u in stage.upstream]
                feeds = [f for f in feeds if f is not None]
                expr = OpExpr(Materialize(), feeds, stage_name, -1)
            memo[key] = expr
            return expr

        def entry(stage_name):
            stage = self.stages[stage_name]
            if stage.entry_marker:
                return node_at(stage_name, -1)
            feeds = [tail(u) for u in stage.upstream]
            return [f for f in feeds if f is not None]

        def tail(stage_name):
            stage = self.stages[stage_name]
            if stage.chain:
                return node_at(stage_name, len(stage.chain) - 1)
            e = entry(stage_name)
            if isinstance(e, list):
                return e[0] if len(e) == 1 else (OpExpr(Materialize(), e, stage_name, -2) if e else None)
            return e

        return [r for r in (tail(s) for s in self.sinks()) if r is not None]

    def copy(self) -> "IngestPlan":
        stages = {n: Stage(s.name, list(s.chain), list(s.predicates), list(s.upstream), list(s.uses),
                           s.entry_marker) for n, s in self.stages.items()}
        return IngestPlan(stages, self.program, self.manifest, dict(self.env), self.source_labels,
                          self.plan_id, self.version)


def insert_materialize(plan: IngestPlan) -> IngestPlan:
    """Add a marker between every adjacent operator pair; idempotent."""
    out = plan.copy()
    for stage in out.stages.values():
        ops = stage.ops
        chain = []
        for i, op in enumerate(ops):
            if i:
                chain.append(Materialize())
            chain.append(op)
        stage.chain = chain
        stage.entry_marker = bool(stage.upstream)
    return out


def pipelined_blocks(plan: IngestPlan) -> list[list[str]]:
    """Maximal operator runs with no marker between them, in topological order."""
    parent: dict[str, str] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    order = plan.ops()
    for op in order:
        parent[op.name] = op.name

    def tail_ops(stage_name):
        stage = plan.stages[stage_name]
        if stage.chain:
            last = stage.chain[-1]
            return [last.name] if isinstance(last, OpSpec) else []
        if stage.entry_marker:
            return []
        return [t for u in stage.upstream for t in tail_ops(u)]

    for name in plan.topo_order():
        stage = plan.stages[name]
        prev = None if stage.entry_marker else [t for u in stage.upstream for t in tail_ops(u)]
        for node in stage.chain:
            if isinstance(node, Materialize):
                prev = None
                continue
            for p in prev or ():
                union(p, node.name)
            prev = [node.name]
    groups: dict[str, list[str]] = {}
    for op in order:
        groups.setdefault(find(op.name), []).append(op.name)
    return list(groups.values())
