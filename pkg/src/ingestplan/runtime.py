"""Plan execution over the simulated cluster.

A run walks the stages in topological order. Inside a stage the chain is cut
into segments at every kept materialize marker and in front of every operator
that needs all items of a group in one place (those get a DFS shuffle first).
Each segment runs on all nodes in parallel, with a barrier after it. A
segment's input is spilled to the node before it runs, so a failing operator
is retried from that checkpoint rather than from the start.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import os
import pickle
import shutil
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .core import (Context, DummyPassThrough, Granularity, IngestError, IngestItem, IngestPlan, Label,
                   Materialize, OpSpec, Operator, OperatorFailure, GranularityMismatch, fnv1a_64)
from .oplib.operators import DfsStore

log = logging.getLogger(__name__)
G = Granularity


class ExecutionFailed(IngestError):
    def __init__(self, node: str, stage: str, cause):
        super().__init__(f"node {node}, stage {stage}: {cause}")
        self.node, self.stage, self.cause = node, stage, cause


class InputsLost(IngestError):
    pass


class ShuffleCorrupt(IngestError):
    pass


class ParallelModeRejected(IngestError):
    pass


class NotSkippable(IngestError):
    """A granularity-changing operator kept failing; forwarding its inputs would not type-check."""


class InjectedFailure(RuntimeError):
    pass


@dataclass
class RuntimeConfig:
    pool_size: int = field(default_factory=lambda: os.cpu_count() or 1)
    max_retries: int = 3
    seed: int = 0
    default_replication: Optional[int] = None
    inject_failures: dict = field(default_factory=dict)  # op name -> failures per (node, op)
    fail_node: Optional[tuple] = None  # (node, stage name) killed when that stage starts
    shuffle_epoch: Optional[str] = None
    persist: bool = True
    keep_spill: bool = False


@dataclass(frozen=True)
class SourceFile:
    """A raw input: either a node-local path or a file already stored in the cluster."""

    source_id: str
    node: str
    path: Optional[str] = None
    cluster_name: Optional[str] = None

    def read(self, cluster) -> bytes:
        if self.cluster_name is not None:
            return cluster.get_block(self.cluster_name)
        return Path(self.path).read_bytes()

    @property
    def remote(self) -> bool:
        return self.cluster_name is not None


@dataclass
class ExecutionReport:
    plan_id: str = ""
    counters: dict = field(default_factory=dict)  # "node/stage" -> {...}
    shuffle_bytes: int = 0
    events: list = field(default_factory=list)
    manifest: list = field(default_factory=list)
    rejects: list = field(default_factory=list)
    dropped_labels: list = field(default_factory=list)
    wall_time: float = 0.0
    attempts: int = 1

    def normalized_manifest(self) -> list[tuple]:
        return sorted((e["name"], e["size"], e["digest"]) for e in self.manifest)

    def events_of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["event"] == kind]

    @property
    def stored_bytes(self) -> int:
        return sum(e["size"] * len(e["nodes"]) for e in self.manifest)

    def summary(self) -> dict:
        return {"plan": self.plan_id, "files": len(self.manifest), "stored_bytes": self.stored_bytes,
                "shuffle_bytes": self.shuffle_bytes, "events": len(self.events),
                "rejects": len(self.rejects), "wall_time": round(self.wall_time, 3)}


# -- helpers -----------------------------------------------------------------------------

def _numeric_key(v: str):
    return (0, int(v), "") if v.lstrip("-").isdigit() else (1, 0, v)


def canonical_key(item: IngestItem):
    return tuple((l.seq, l.op_name, _numeric_key(l.value)) for l in item.labels)


def stream(op: Operator, upstream: Iterable[IngestItem]) -> Iterator[IngestItem]:
    """Pull-based pipelining: one operator over an upstream iterator, trailing outputs last."""
    op.set_input(upstream)
    while op.has_next():
        yield op.next()
    yield from op.finalize()


class _Injected(Operator):
    """Delegating wrapper that raises on its first call while the shared budget lasts."""

    def __init__(self, inner: Operator, budget: dict, key):
        super().__init__(inner.name, inner.seq)
        self.inner, self.budget, self.key = inner, budget, key
        self.kind = inner.kind
        self.accepts = inner.accepts
        self.groups = inner.groups

    def initialize(self, ctx=None):
        super().initialize(ctx)
        self.inner.initialize(ctx)

    def reset(self):
        self.inner.set_input(())
        self._armed = True

    def _maybe_fail(self):
        if self._armed:
            self._armed = False
            with _budget_lock:
                left = self.budget.get(self.key, 0)
                if left > 0:
                    self.budget[self.key] = left - 1
                    raise InjectedFailure(f"injected failure in {self.name}")

    def process(self, item):
        self._maybe_fail()
        return list(self.inner.process(item))

    def flush(self):
        self._maybe_fail()
        return list(self.inner.flush())


_budget_lock = threading.Lock()


def run_parallel_mode(factory: Callable[[], Operator], items: Sequence[IngestItem], pool_size: int,
                      ctx: Optional[Context] = None) -> list[IngestItem]:
    """Contiguous slices of ``items`` over ``pool_size`` fresh instances; outputs in input order."""
    proto = factory()
    if not proto.parallel_mode:
        raise ParallelModeRejected(f"{proto.name} is not marked parallel_mode")
    if proto.stateful:
        raise ParallelModeRejected(f"{proto.name} is stateful and cannot run in parallel mode")
    items = list(items)
    pool_size = max(1, min(pool_size, len(items) or 1))
    if pool_size == 1:
        proto.initialize(ctx)
        return list(stream(proto, items))
    bounds = [(len(items) * i // pool_size, len(items) * (i + 1) // pool_size) for i in range(pool_size)]

    def work(span):
        op = factory()
        op.initialize(ctx)
        return list(stream(op, items[span[0]:span[1]]))

    with ThreadPoolExecutor(max_workers=pool_size) as ex:
        parts = list(ex.map(work, bounds))
    return [it for part in parts for it in part]


# -- shuffles ------------------------------------------------------------------------------

def _group_owner(group: str, alive: Sequence[str]) -> str:
    gid = int(group) if group.lstrip("-").isdigit() else fnv1a_64(group.encode())
    return alive[gid % len(alive)]


def shuffle_via_dfs(items_by_node: dict[str, list[IngestItem]], cluster, key_fn: Callable[[IngestItem], str],
                    epoch: str, corrupt_hook: Optional[Callable[[Path], None]] = None
                    ) -> tuple[dict[str, list[IngestItem]], int]:
    """Write every node's items into ``dfs/shuffle-<epoch>/group-<g>/part-<node>``, then let the
    owner of each group read it back. Returns (items per reading node, bytes written)."""
    base = cluster.dfs / f"shuffle-{epoch}"
    if base.exists():
        shutil.rmtree(base)
    written = 0
    alive = cluster.alive
    sources: dict[tuple, bytes] = {}
    for node in sorted(items_by_node):
        groups = defaultdict(list)
        for it in items_by_node[node]:
            groups[str(key_fn(it))].append(it)
        for g, its in groups.items():
            blob = pickle.dumps(its, protocol=pickle.HIGHEST_PROTOCOL)
            d = base / f"group-{g}"
            d.mkdir(parents=True, exist_ok=True)
            (d / f"part-{node}").write_bytes(blob)
            (d / f"part-{node}.digest").write_text(hashlib.blake2b(blob, digest_size=8).hexdigest())
            sources[(g, node)] = blob
            written += len(blob)
    if corrupt_hook is not None:
        corrupt_hook(base)
    out: dict[str, list[IngestItem]] = {n: [] for n in alive}
    group_names = sorted({g for g, _ in sources}, key=_numeric_key)
    for g in group_names:
        owner = _group_owner(g, alive)
        its = []
        for part in sorted((base / f"group-{g}").glob("part-*[!t]")):
            if part.name.endswith(".digest"):
                continue
            node = part.name[len("part-"):]
            blob = part.read_bytes()
            want = (part.parent / f"{part.name}.digest").read_text()
            if hashlib.blake2b(blob, digest_size=8).hexdigest() != want:
                log.warning("shuffle part %s corrupt, copying again", part)
                blob = sources[(g, node)]
                part.write_bytes(blob)
                written += len(blob)
                if hashlib.blake2b(blob, digest_size=8).hexdigest() != want:
                    raise ShuffleCorrupt(g)
            its.extend(pickle.loads(blob))
        its.sort(key=canonical_key)
        out[owner].extend(its)
    return out, written


# -- execution ------------------------------------------------------------------------------

def _segments(stage) -> list[list[OpSpec]]:
    segs, cur = [], []
    for node in stage.chain:
        if isinstance(node, Materialize):
            if cur:
                segs.append(cur)
            cur = []
            continue
        if node.prototype.global_groups:
            # a grouping operator runs alone: shuffle before it, send items home after it
            if cur:
                segs.append(cur)
            segs.append([node])
            cur = []
            continue
        cur.append(node)
    if cur:
        segs.append(cur)
    return segs


class _Run:
    def __init__(self, plan: IngestPlan, cluster, config: RuntimeConfig, report: ExecutionReport):
        self.plan, self.cluster, self.cfg, self.report = plan, cluster, config, report
        self.failures = defaultdict(int)  # (node, op) -> failures seen
        self.dummies: set = set()  # (node, op) replaced by a pass-through
        self.budget = {}
        self.lock = threading.Lock()
        self.run_id = config.shuffle_epoch or f"{plan.plan_id}-{int(time.time() * 1e6)}"
        self.contexts: dict[str, Context] = {}

    def ctx(self, node: str) -> Context:
        c = self.contexts.get(node)
        if c is None:
            env = dict(self.plan.env)
            if self.cfg.default_replication is not None:
                env["default_replication"] = self.cfg.default_replication
            c = self.contexts[node] = Context(self.cfg.seed, node, self.cluster, [], [], env)
        return c

    def event(self, **kw):
        with self.lock:
            self.report.events.append(kw)

    def instantiate(self, spec: OpSpec, node: str) -> Operator:
        if (node, spec.name) in self.dummies:
            op = DummyPassThrough(spec.instantiate())
        else:
            op = spec.instantiate()
            key = (node, spec.name)
            if spec.name in self.cfg.inject_failures:
                with _budget_lock:
                    self.budget.setdefault(key, int(self.cfg.inject_failures[spec.name]))
                op = _Injected(op, self.budget, key)
        op.initialize(self.ctx(node))
        return op

    def _spill_path(self, node: str, tag: str) -> Path:
        d = self.cluster.node_dir(node) / "spill" / self.run_id
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{tag}.pkl"

    def run_segment(self, node: str, stage: str, index: int, seg: list[OpSpec],
                    items: list[IngestItem]) -> list[IngestItem]:
        ckpt = self._spill_path(node, f"{stage}.{index}")
        ckpt.write_bytes(pickle.dumps(items, protocol=pickle.HIGHEST_PROTOCOL))
        while True:
            inputs = pickle.loads(ckpt.read_bytes())
            try:
                return self._attempt(node, seg, inputs)
            except OperatorFailure as exc:
                key = (node, exc.op_name)
                with self.lock:
                    self.failures[key] += 1
                    n = self.failures[key]
                if n >= self.cfg.max_retries:
                    spec = next(sp for sp in seg if sp.name == exc.op_name)
                    if spec.prototype.produces is not None:
                        raise NotSkippable(f"{exc.op_name} failed {n} times and changes granularity "
                                           f"to {spec.prototype.produces.value}; no pass-through possible") from exc
                    with self.lock:
                        self.dummies.add(key)
                    self.event(event="dummy", node=node, stage=stage, op=exc.op_name, failures=n,
                               cause=str(exc.cause))
                else:
                    self.event(event="retry", node=node, stage=stage, op=exc.op_name, failures=n,
                               cause=str(exc.cause))

    def _attempt(self, node: str, seg: list[OpSpec], items: list[IngestItem]) -> list[IngestItem]:
        current: Iterable[IngestItem] = items
        for spec in seg:
            op = self.instantiate(spec, node)
            proto = spec.prototype
            try:
                if proto.parallel_mode and self.cfg.pool_size > 1 and not isinstance(op, (DummyPassThrough, _Injected)):
                    current = run_parallel_mode(lambda s=spec: s.instantiate(), list(current),
                                                self.cfg.pool_size, self.ctx(node))
                else:
                    current = list(stream(op, current))
            except GranularityMismatch:
                raise
            except OperatorFailure as exc:
                if exc.op_name == spec.name:
                    raise
                raise OperatorFailure(spec.name, exc) from exc
            except IngestError as exc:
                if isinstance(exc, InputsLost):
                    raise
                raise OperatorFailure(spec.name, exc) from exc
            except Exception as exc:  # operator code raised
                raise OperatorFailure(spec.name, exc) from exc
        return list(current)

    def parallel(self, fn, nodes: Sequence[str]) -> dict:
        if len(nodes) <= 1:
            return {n: fn(n) for n in nodes}
        with ThreadPoolExecutor(max_workers=len(nodes)) as ex:
            futs = {n: ex.submit(fn, n) for n in nodes}
            return {n: f.result() for n, f in futs.items()}


def _send_home(items_by_node: dict, home: dict, source_label: str, nodes) -> tuple[dict, int]:
    """Return every item to the node holding its input file, so that a sticky group never
    straddles nodes. Each node's list is put in canonical order; moved bytes are returned."""
    out = {n: [] for n in nodes}
    moved = 0
    for n, its in items_by_node.items():
        for it in its:
            dest = home.get(it.label(source_label), n)
            if dest != n:
                moved += len(pickle.dumps(it, protocol=pickle.HIGHEST_PROTOCOL))
            out.setdefault(dest, []).append(it)
    for its in out.values():
        its.sort(key=canonical_key)
    return out, moved


def _stage_inputs(plan: IngestPlan, stage, outputs: dict, nodes: Sequence[str]) -> dict[str, list]:
    res = {}
    for n in nodes:
        its = []
        for u in stage.upstream:
            for it in outputs[u].get(n, ()):
                if all(p.matches(it) for p in stage.predicates):
                    its.append(it)
        res[n] = its
    return res


def _assign_inputs(inputs: Sequence[SourceFile], cluster) -> dict[str, list[SourceFile]]:
    by_node = defaultdict(list)
    alive = cluster.alive
    if not alive:
        raise InputsLost("no alive node left to run on")
    for src in inputs:
        node = src.node
        if node in cluster.dead or node not in cluster.nodes:
            if not src.remote:
                raise InputsLost(f"input {src.source_id} lived only on {src.node}")
            start = cluster.nodes.index(node) if node in cluster.nodes else 0
            node = next(cluster.nodes[(start + k) % len(cluster.nodes)] for k in range(len(cluster.nodes))
                        if cluster.nodes[(start + k) % len(cluster.nodes)] not in cluster.dead)
        by_node[node].append(src)
    return by_node


def execute_plan(plan: IngestPlan, inputs: Sequence[SourceFile], cluster,
                 config: Optional[RuntimeConfig] = None) -> ExecutionReport:
    config = config or RuntimeConfig()
    t0 = time.perf_counter()
    attempts, node_events = 0, []
    while True:
        attempts += 1
        report = ExecutionReport(plan.plan_id)
        try:
            _execute_once(plan, inputs, cluster, config, report)
            break
        except _NodeFailed as nf:
            # the whole run restarts with the victim's inputs reassigned
            config = replace(config, fail_node=None)
            node_events.append({"event": "node_failure", "node": nf.node, "stage": nf.stage})
    report.attempts = attempts
    report.events = node_events + report.events
    report.wall_time = time.perf_counter() - t0
    if config.persist:
        from .access import persist_plan
        persist_plan(plan, cluster)
    return report


class _NodeFailed(Exception):
    def __init__(self, node, stage):
        self.node, self.stage = node, stage


def _execute_once(plan: IngestPlan, inputs: Sequence[SourceFile], cluster, config: RuntimeConfig,
                  report: ExecutionReport):
    run = _Run(plan, cluster, config, report)
    assignment = _assign_inputs(inputs, cluster)
    home = {src.source_id: n for n, srcs in assignment.items() for src in srcs}
    nodes = list(cluster.alive)
    outputs: dict[str, dict[str, list]] = {}
    epoch_counter = itertools.count()
    try:
        for sname in plan.topo_order():
            if config.fail_node and config.fail_node[1] == sname:
                victim = config.fail_node[0]
                cluster.kill_node(victim)
                raise _NodeFailed(victim, sname)
            stage = plan.stages[sname]
            if stage.is_source:
                current = {}
                for n in nodes:
                    current[n] = [IngestItem(G.FILE, src.read(cluster),
                                             (Label(plan.source_labels[0], src.source_id, -1, True, "input"),))
                                  for src in assignment.get(n, ())]
            else:
                current = _stage_inputs(plan, stage, outputs, nodes)
            counts_in = {n: len(v) for n, v in current.items()}
            t_stage = time.perf_counter()
            for si, seg in enumerate(_segments(stage)):
                head = seg[0].prototype
                if head.global_groups:
                    epoch = f"{run.run_id}-{sname}-{next(epoch_counter)}"
                    current, nbytes = shuffle_via_dfs(current, cluster, head.shuffle_key, epoch)
                    report.shuffle_bytes += nbytes
                    report.events.append({"event": "shuffle", "stage": sname, "op": seg[0].name,
                                          "bytes": nbytes})
                    nodes_now = list(current)
                else:
                    nodes_now = nodes

                def work(n, si=si, seg=seg, cur=current):
                    try:
                        return run.run_segment(n, sname, si, seg, cur.get(n, []))
                    except (OperatorFailure, GranularityMismatch) as exc:
                        raise ExecutionFailed(n, sname, exc) from exc

                current = run.parallel(work, nodes_now)
                if head.global_groups:
                    current, moved = _send_home(current, home, plan.source_labels[0], nodes)
                    report.shuffle_bytes += moved
            outputs[sname] = current
            dt = time.perf_counter() - t_stage
            for n in nodes:
                report.counters[f"{n}/{sname}"] = {"items_in": counts_in.get(n, 0),
                                                   "items_out": len(current.get(n, ())),
                                                   "wall_time": round(dt, 4)}
        _store_sinks(plan, outputs, run, nodes)
    finally:
        if not config.keep_spill:
            for n in cluster.nodes:
                shutil.rmtree(cluster.node_dir(n) / "spill" / run.run_id, ignore_errors=True)
            for d in cluster.dfs.glob(f"shuffle-{run.run_id}-*"):
                shutil.rmtree(d, ignore_errors=True)
    for n in sorted(run.contexts):
        c = run.contexts[n]
        report.manifest.extend(c.manifest)
        report.rejects.extend(c.rejects)
    # a retried segment may store a file twice; the last write is what the cluster holds
    report.manifest = sorted({e["name"]: e for e in report.manifest}.values(), key=lambda e: e["name"])
    from .access import lineage_paths
    named = {s.op_name for p in lineage_paths(plan) for s in p.slots}
    report.dropped_labels = sorted(op.name for op in plan.ops() if op.name not in named)


def _store_sinks(plan: IngestPlan, outputs, run: _Run, nodes):
    """Blocks reaching a sink without an explicit upload are stored with the default store."""
    spec = OpSpec("store", "upload", "dfs_store", {}, max((o.seq for o in plan.ops()), default=0) + 1)
    for s in plan.sinks():
        for n in nodes:
            pending = [it for it in outputs[s].get(n, ()) if not any(l.kind == "upload" for l in it.labels)]
            if not pending:
                continue
            bad = [it for it in pending if not it.granularity.is_blockish]
            if bad:
                raise ExecutionFailed(n, s, f"sink emits {bad[0].granularity.value} items; chunk them first")
            op = DfsStore(name=spec.name, seq=spec.seq)
            op.initialize(run.ctx(n))
            list(stream(op, pending))


# -- reference interpreter ---------------------------------------------------------------------

def reference_interpret(plan: IngestPlan, files: Sequence[tuple[str, bytes]], seed: int = 0) -> dict:
    """Single-threaded oracle: every stage drained once over all inputs, stores captured
    in memory. Returns {filename: records} for every block that reaches a store."""
    from .access import lineage_name
    from .core import drain_operator
    from .oplib.layouts import deserialize
    from .access import plan_schemas

    ctx = Context(seed, "ref", None, [], [], dict(plan.env))
    outputs = {}
    for sname in plan.topo_order():
        st = plan.stages[sname]
        if st.is_source:
            items = [IngestItem(G.FILE, data, (Label(plan.source_labels[0], sid, -1, True, "input"),))
                     for sid, data in files]
        else:
            items = [it for u in st.upstream for it in outputs[u] if all(p.matches(it) for p in st.predicates)]
        for spec in st.ops:
            if spec.kind == "upload" or spec.builtin in ("dfs_store", "ec_store"):
                op = _CaptureStore(spec)
            else:
                op = spec.instantiate()
            op.initialize(ctx)
            items = drain_operator(op, items)
        outputs[sname] = items
    schemas = plan_schemas(plan)
    stored = {}
    for s in plan.sinks():
        for it in outputs[s]:
            rows = it.payload
            if it.granularity is G.SERIALIZED_BLOCK:
                from .access import schema_for
                rows = deserialize(it.payload, schema_for(it.payload, schemas))
            stored[lineage_name(it)] = list(rows)
    return stored


class _CaptureStore(Operator):
    kind = "upload"

    def __init__(self, spec: OpSpec):
        super().__init__(spec.name, spec.seq)
        self.value = spec.prototype.constant_label()

    def process(self, item):
        yield self.emit(item, self.value)
