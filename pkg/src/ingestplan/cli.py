"""Command-line interface. Every command prints JSON lines; exit status 0 means full pass."""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import access
from .cluster import ClusterError, create_cluster, open_cluster
from .core import IngestError
from .datagen import TABLES, gen_data
from .lang import compile_text, default_registry, render_plan
from .oplib.layouts import IoStats, parse_value
from .oplib.operators import parse_conditions
from .optimizer import optimize_plan
from .recovery import daemon_run, default_catalog
from .runtime import RuntimeConfig, SourceFile, execute_plan

log = logging.getLogger("ingestplan")


def emit(obj) -> None:
    print(json.dumps(obj, default=str, sort_keys=True), flush=True)


@contextlib.contextmanager
def root_lock(root: Path):
    """Serializes mutating commands against one cluster root across processes."""
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# -- cluster ---------------------------------------------------------------------------

def cmd_cluster(args) -> int:
    root = Path(args.root)
    if args.action == "create":
        with root_lock(root):
            c = create_cluster(args.nodes, root, args.replication, force=args.force)
        emit({"event": "cluster_created", "root": str(root), "nodes": c.nodes})
        return 0
    c = open_cluster(root)
    if args.action == "kill-node":
        with root_lock(root):
            c.kill_node(args.target)
        emit({"event": "node_killed", "node": args.target, "alive": c.alive})
    elif args.action == "corrupt":
        with root_lock(root):
            c.corrupt_block(args.target, args.replica)
        emit({"event": "block_corrupted", "file": args.target, "replica": args.replica})
    else:
        health = c.scan_health()
        bad = {f: h for f, h in health.items() if any(s != "ok" for s in h.values())}
        emit({"event": "status", "nodes": c.nodes, "dead": sorted(c.dead), "files": len(health),
              "stored_bytes": c.stored_bytes(), "unhealthy": len(bad), "plans": access.list_plans(c)})
        for f, h in sorted(bad.items()):
            emit({"event": "unhealthy", "file": f, "replicas": h})
    return 0


# -- data + ingest -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    meta = gen_data(args.out, args.table, args.rows, args.files, args.seed,
                    inject_dc=round(args.dc_rate * args.rows), inject_fd=round(args.fd_rate * args.rows),
                    dirty=args.dirty)
    emit({"event": "generated", "table": meta.table, "rows": meta.rows, "files": meta.files,
          "sidecar": meta.sidecar, "dc_violations": len(meta.dc_violations),
          "fd_violations": len(meta.fd_violations), "dirty_values": meta.dirty_values})
    return 0


def _input_files(spec: list[str]) -> list[str]:
    out = []
    for s in spec:
        p = Path(s)
        out.extend(sorted(str(x) for x in p.glob("*.tbl")) if p.is_dir() else [str(p)])
    return out


def _parse_kv(pairs, cast=str) -> dict:
    out = {}
    for p in pairs or ():
        k, _, v = p.partition("=")
        out[k] = cast(v)
    return out


def cmd_ingest(args) -> int:
    root = Path(args.root)
    cluster = open_cluster(root)
    registry = default_registry()
    for spec in args.override or ():
        # name.param=value, e.g. 100mbBlocks.max_bytes=65536
        lhs, _, value = spec.partition("=")
        name, _, param = lhs.partition(".")
        registry = registry.override(**{name: {param: int(value) if value.lstrip("-").isdigit() else value}})
    plan = compile_text(Path(args.program).read_text(), registry, plan_id=args.plan_id or Path(args.program).stem)
    before = render_plan(plan)
    trace = []
    if not args.no_optimize:
        plan, trace = optimize_plan(plan)
    if args.explain:
        emit({"event": "explain", "before": before, "after": render_plan(plan),
              "trace": [{"rule": r, "root": f"{st}[{ix}]", "iteration": it} for r, st, ix, it in trace]})
    files = _input_files(args.input)
    sources = [SourceFile(f"{args.prefix}{i}", cluster.nodes[i % len(cluster.nodes)], path=f)
               for i, f in enumerate(files)]
    cfg = RuntimeConfig(pool_size=args.pool_size, seed=args.seed,
                        inject_failures=_parse_kv(args.inject, int))
    with root_lock(root):
        report = execute_plan(plan, sources, cluster, cfg)
    emit({"event": "ingested", **report.summary(), "dropped_labels": report.dropped_labels})
    for e in report.events:
        if e["event"] != "shuffle":
            emit(e)
    return 0


# -- queries -------------------------------------------------------------------------------

def _typed_selection(plan, where: str | None):
    if not where:
        return None
    types = {}
    for s in access.plan_schemas(plan).values():
        types.update(zip(s.names, s.types))
    return [(a, c, parse_value(v, types.get(a, "string"))) for a, c, v in parse_conditions(where)]


def _dataset(cluster, plan_id, args):
    plan = access.load_plan(cluster, plan_id)
    ds = access.Dataset(cluster, plan)
    if getattr(args, "layout", None):
        ds = ds.filter_replica_by_layout(args.layout)
    for op, value in _parse_kv(getattr(args, "label", None)).items():
        ds = ds.filter_replica(op, value)
    return plan, ds


def cmd_query(args) -> int:
    cluster = open_cluster(args.root)
    stats = IoStats()
    if args.action == "select":
        plan, ds = _dataset(cluster, args.plan, args)
        proj = args.project.split(",") if args.project else None
        rows = access.scan_select_project(ds, proj, _typed_selection(plan, args.where), stats)
        for r in rows[:args.limit]:
            emit({"row": list(r)})
        emit({"event": "select", "rows": len(rows), "files": len(ds), **stats.as_dict()})
    elif args.action == "agg":
        plan, ds = _dataset(cluster, args.plan, args)
        splits = access.split_by_key(cluster, ds, args.key)
        res = access.aggregate_by_key(splits, ds, args.key, args.agg, args.attr, stats)
        for k in sorted(res):
            emit({"key": k, args.agg: res[k]})
        emit({"event": "agg", "groups": len(res), "splits": len(splits), **stats.as_dict()})
    elif args.action == "join":
        _, left = _dataset(cluster, args.plan, args)
        right = access.Dataset(cluster, access.load_plan(cluster, args.right))
        splits = access.co_split_by_key(cluster, (left, args.key), (right, args.right_key or args.key))
        rows = access.hash_join_cogrouped(splits, left, args.key, right, args.right_key or args.key, stats=stats)
        emit({"event": "join", "rows": len(rows), "splits": len(splits), **stats.as_dict()})
    else:
        _, ds = _dataset(cluster, args.plan, args)
        for sp in access.split_by_key(cluster, ds, args.key, args.max_split_size):
            emit({"split": sp.key, "files": len(sp.members), "size": sp.size, "node": sp.preferred_node})
    return 0


# -- recovery, scenarios, plans ------------------------------------------------------------

def cmd_recover(args) -> int:
    root = Path(args.root)
    cluster = open_cluster(root)
    catalog = default_catalog(cluster)
    if not catalog:
        emit({"event": "recover", "error": "no ingested plans"})
        return 1
    with root_lock(root):
        events = daemon_run(cluster, catalog, args.interval, once=not args.daemon, max_cycles=args.max_cycles)
    for e in events:
        emit({"event": "recovered" if e.get("mechanism") else "unrecoverable", **e})
    return 0 if all(e.get("mechanism") for e in events) else 1


def cmd_scenario(args) -> int:
    from .scenarios import SCENARIOS, run_scenario

    if args.action == "list":
        for sid, sc in SCENARIOS.items():
            emit({"scenario": sid, "description": sc.description,
                  "programs": [p for _, p in sc.programs]})
        return 0
    ids = list(SCENARIOS) if args.id == "all" else [args.id]
    ok_all = True
    for sid in ids:
        work = Path(args.workdir) / sid if args.workdir else Path(tempfile.mkdtemp(prefix=f"{sid}-"))
        t0 = time.perf_counter()
        res = run_scenario(sid, work, rows=args.rows, files=args.files, nodes=args.nodes,
                           pool_size=args.pool_size, seed=args.seed)
        out = res.summary()
        out["wall_time"] = round(time.perf_counter() - t0, 3)
        out["stored_bytes"] = sum(r.stored_bytes for r in res.reports)
        out["shuffle_bytes"] = sum(r.shuffle_bytes for r in res.reports)
        emit(out)
        ok_all &= res.ok
    return 0 if ok_all else 1


def cmd_plan(args) -> int:
    cluster = open_cluster(args.root)
    if args.action == "list":
        for pid in access.list_plans(cluster):
            emit({"plan": pid})
        return 0
    plan = access.load_plan(cluster, args.id)
    emit({"plan": plan.plan_id, "version": plan.version, "render": render_plan(plan),
          "stages": plan.topo_order()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ingestplan", description=__doc__)
    ap.add_argument("--root", default=os.environ.get("INGESTPLAN_ROOT", "cluster"), help="cluster root directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("cluster")
    c.add_argument("action", choices=["create", "kill-node", "corrupt", "status"])
    c.add_argument("target", nargs="?", help="node (kill-node) or file name (corrupt)")
    c.add_argument("--nodes", type=int, default=3)
    c.add_argument("--replication", type=int, default=3)
    c.add_argument("--replica", type=int, default=0)
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_cluster)

    g = sub.add_parser("gen")
    g.add_argument("--table", choices=sorted(TABLES), default="lineitem")
    g.add_argument("--rows", type=int, default=10_000)
    g.add_argument("--files", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fd-rate", type=float, default=0.0)
    g.add_argument("--dc-rate", type=float, default=0.0)
    g.add_argument("--dirty", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    i = sub.add_parser("ingest")
    i.add_argument("program")
    i.add_argument("--input", nargs="+", required=True, help="files or directories of .tbl files")
    i.add_argument("--explain", action="store_true")
    i.add_argument("--no-optimize", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--plan-id")
    i.add_argument("--prefix", default="f", help="source label prefix")
    i.add_argument("--pool-size", type=int, default=1)
    i.add_argument("--override", action="append", help="registry param override, name.param=value")
    i.add_argument("--inject", action="append", help="fault injection op=count")
    i.set_defaults(fn=cmd_ingest)

    q = sub.add_parser("query")
    q.add_argument("action", choices=["select", "agg", "join", "show-splits"])
    q.add_argument("--plan", required=True)
    q.add_argument("--project")
    q.add_argument("--where", help="e.g. 'quantity<3 and discount>0.05'")
    q.add_argument("--layout")
    q.add_argument("--label", action="append", help="replica/block filter op=value")
    q.add_argument("--key", default="orderkey")
    q.add_argument("--agg", choices=["count", "sum"], default="count")
    q.add_argument("--attr")
    q.add_argument("--right", help="second plan id for join")
    q.add_argument("--right-key")
    q.add_argument("--max-split-size", type=int)
    q.add_argument("--limit", type=int, default=10)
    q.set_defaults(fn=cmd_query)

    r = sub.add_parser("recover")
    mode = r.add_mutually_exclusive_group(required=True)
    mode.add_argument("--daemon", action="store_true")
    mode.add_argument("--once", action="store_true")
    r.add_argument("--interval", type=float, default=1.0)
    r.add_argument("--max-cycles", type=int)
    r.set_defaults(fn=cmd_recover)

    s = sub.add_parser("scenario")
    s.add_argument("action", choices=["run", "list"])
    s.add_argument("id", nargs="?", default="all")
    s.add_argument("--rows", type=int, default=10_000)
    s.add_argument("--files", type=int, default=4)
    s.add_argument("--nodes", type=int, default=3)
    s.add_argument("--pool-size", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workdir")
    s.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("plan")
    p.add_argument("action", choices=["show", "list"])
    p.add_argument("id", nargs="?")
    p.set_defaults(fn=cmd_plan)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if args.cmd == "cluster" and args.action in ("kill-node", "corrupt") and not args.target:
        emit({"error": f"cluster {args.action} needs a target"})
        return 2
    if args.cmd == "plan" and args.action == "show" and not args.id:
        emit({"error": "plan show needs an id"})
        return 2
    try:
        return args.fn(args)
    except BrokenPipeError:
        # downstream closed the pipe (e.g. `| head`); not an error for us
        sys.stdout = open(os.devnull, "w")
        return 0
    except (IngestError, ClusterError, OSError, KeyError, ValueError) as exc:
        emit({"error": type(exc).__name__, "message": str(exc)})
        return 1
