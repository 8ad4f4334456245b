"""The fifteen end-to-end ingestion scenarios.

Each scenario generates its data, ingests it into a fresh simulated cluster
with one or more plans, and computes a small self-check report from what was
stored. Tests recompute the interesting numbers with their own oracles; the
reports here are what the CLI prints.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .access import Dataset, co_split_by_key, hash_join_cogrouped, nested_loop_join, read_records, plan_schemas
from .cluster import create_cluster
from .core import IngestError
from .datagen import TABLES, GeneratedData, SHIPDATE_BOUNDARIES, gen_data
from .lang import PROGRAM_DIR, compile_text, default_registry
from .oplib.layouts import IoStats
from .optimizer import optimize_plan
from .recovery import read_stripes
from .runtime import ExecutionReport, RuntimeConfig, SourceFile, execute_plan

class ScenarioFailed(IngestError):
    def __init__(self, sid: str, checks: dict):
        failed = {k: v for k, v in checks.items() if k != "ok"}
        super().__init__(f"scenario {sid} failed: {failed}")
        self.sid, self.checks = sid, checks


LI = TABLES["lineitem"]
QTY, DISC, OKEY, LNUM, SHIP = (LI.index(a) for a in ("quantity", "discount", "orderkey", "linenumber", "shipdate"))


@dataclass
class Scenario:
    id: str
    description: str
    programs: list  # [(table, program file)]
    check: Callable
    data: dict = field(default_factory=dict)  # table -> extra gen_data kwargs (may be callables of rows)
    min_nodes: int = 1
    overrides: Optional[Callable] = None  # (rows per file) -> registry overrides


@dataclass
class ScenarioResult:
    id: str
    cluster: object
    plans: list
    reports: list
    data: dict
    checks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.checks.get("ok"))

    @property
    def report(self) -> ExecutionReport:
        return self.reports[0]

    @property
    def plan(self):
        return self.plans[0]

    def normalized_manifest(self) -> list:
        return sorted(e for r in self.reports for e in r.normalized_manifest())

    def summary(self) -> dict:
        return {"scenario": self.id, "ok": self.ok, "checks": self.checks,
                "runs": [r.summary() for r in self.reports]}


# -- helpers ------------------------------------------------------------------------------

def stored_records(res: ScenarioResult, plan_index: int = 0, files=None) -> dict[str, list]:
    plan = res.plans[plan_index]
    ds = Dataset(res.cluster, plan) if files is None else files
    schemas = plan_schemas(plan)
    return {f: read_records(res.cluster, plan, f, schemas=schemas) for f in ds}


def _fids(rows) -> set:
    return {(r[OKEY], r[LNUM]) for r in rows}


def _label(res, f, op, plan_index=0):
    return Dataset(res.cluster, res.plans[plan_index], [f]).label_of(f, op)


def _by_label(res, op, plan_index=0) -> dict[str, list]:
    ds = Dataset(res.cluster, res.plans[plan_index])
    out = defaultdict(list)
    for f in ds.files:
        out[ds.label_of(f, op)].append(f)
    return out


def _size(res, files) -> int:
    return sum(res.cluster.stat(f).size * len(res.cluster.stat(f).nodes) for f in files)


# -- checks --------------------------------------------------------------------------------

def _check_violations(kind):
    def check(res: ScenarioResult) -> dict:
        meta: GeneratedData = res.data["lineitem"]
        expected = {tuple(x) for x in getattr(meta, f"{kind}_violations")}
        q = _by_label(res, "filter1")
        detected = set()
        for rows in stored_records(res, files=q.get("1", [])).values():
            detected |= _fids(rows)
        clean = sum(len(v) for v in stored_records(res, files=q.get("0", [])).values())
        return {"ok": detected == expected and clean + len(detected) == meta.rows,
                "expected": len(expected), "detected": len(detected), "clean_rows": clean}
    return check


def _check_dc_repair(res):
    meta = res.data["lineitem"]
    rows = [r for v in stored_records(res).values() for r in v]
    residual = sum(1 for r in rows if r[QTY] < 3 and r[DISC] > 0.09)
    injected = {tuple(x) for x in meta.dc_violations}
    repaired = sum(1 for r in rows if (r[OKEY], r[LNUM]) in injected and r[DISC] == 0.09)
    return {"ok": residual == 0 and len(rows) == meta.rows and repaired == len(injected), "rows": len(rows), "residual_violations": residual,
            "injected": len(meta.dc_violations), "repaired": repaired}


def _check_bernoulli(res):
    meta = res.data["lineitem"]
    by = _by_label(res, "replicate1")
    full = sum(len(v) for v in stored_records(res, files=by.get("0", [])).values())
    sample = sum(len(v) for v in stored_records(res, files=by.get("1", [])).values())
    p, n = 0.1, meta.rows
    sigma = math.sqrt(n * p * (1 - p))
    return {"ok": full == n and abs(sample - p * n) <= 4 * sigma, "full": full, "sample": sample,
            "expected": p * n, "sigma": round(sigma, 3)}


def _check_reservoir(res):
    recs = stored_records(res)
    ds = Dataset(res.cluster, res.plan)
    full, sample = defaultdict(set), defaultdict(set)
    for f, rows in recs.items():
        tgt = sample if ds.label_of(f, "replicate1") is not None else full
        tgt[ds.label_of(f, "input")] |= set(rows)
    sizes = {g: len(s) for g, s in sample.items()}
    ok = all(sizes.get(g, 0) == min(100, len(full[g])) and sample[g] <= full[g] for g in full)
    return {"ok": ok, "groups": len(full), "sample_sizes": sizes}


def _check_stratified(scope):
    from .oplib.operators import stratum_quota

    def check(res):
        recs = stored_records(res)
        meta = res.data["lineitem"]
        from .datagen import parse_rows
        strata = defaultdict(Counter)  # group -> stratum -> size
        lists = [["AIR", "REG AIR"], ["MAIL"], ["RAIL", "TRUCK"], ["SHIP", "FOB"]]
        mode = LI.index("shipmode")

        def sid(r):
            return next((str(i) for i, g in enumerate(lists) if r[mode] in g), "other")
        for i, path in enumerate(meta.files):
            for r in parse_rows(Path(path).read_text(), LI):
                strata["*" if scope == "global" else f"l{i}"][sid(r)] += 1
        got = defaultdict(Counter)
        ds = Dataset(res.cluster, res.plan)
        for f, rows in recs.items():
            g = "*" if scope == "global" else ds.label_of(f, "input")
            got[g][ds.label_of(f, "partition1")] += len(rows)
        want = {g: {s: stratum_quota(0.1, n) for s, n in c.items()} for g, c in strata.items()}
        have = {g: dict(c) for g, c in got.items()}
        shuffle_ok = res.report.shuffle_bytes > 0 if scope == "global" else res.report.shuffle_bytes == 0
        return {"ok": want == have and shuffle_ok, "strata": have, "shuffle_bytes": res.report.shuffle_bytes}
    return check


def _check_layouts(res):
    ds = Dataset(res.cluster, res.plan)
    by_block = defaultdict(dict)
    for f, rows in stored_records(res).items():
        key = (ds.label_of(f, "input"), ds.label_of(f, "chunk1"))
        layout = next(v for v in (ds.label_of(f, s) for s in ("serialize1", "serialize2", "serialize3")) if v)
        by_block[key][layout] = rows
    ok = all(set(v) == {"srow", "rcf", "pax"} and v["srow"] == v["rcf"] == v["pax"] for v in by_block.values())
    return {"ok": ok, "blocks": len(by_block)}


def _check_hybrid(res):
    ds = Dataset(res.cluster, res.plan)
    layouts = Counter()
    rep_ok = True
    blocks = set()
    for f in ds.files:
        layouts[next(v for v in (ds.label_of(f, s) for s in ("serialize1", "serialize2", "serialize3")) if v)] += 1
        rep_ok &= len(res.cluster.stat(f).nodes) == min(3, len(res.cluster.nodes))
        key = (ds.label_of(f, "input"), ds.label_of(f, "chunk1"))
        blocks.add(key)
    spread = max(layouts.values()) - min(layouts.values()) if layouts else 0
    return {"ok": rep_ok and len(blocks) == len(ds.files) and set(layouts) == {"srow", "rcf", "pax"},
            "layouts": dict(layouts), "imbalance": spread}


def _check_ranges(res):
    import datetime as dt
    bounds = [dt.date.fromisoformat(b) for b in SHIPDATE_BOUNDARIES]
    ok, parts = True, set()
    ds = Dataset(res.cluster, res.plan)
    for f, rows in stored_records(res).items():
        p = int(ds.label_of(f, "partition1"))
        parts.add(p)
        lo = bounds[p - 1] if p > 0 else dt.date.min
        hi = bounds[p] if p < len(bounds) else dt.date.max
        ok &= all(lo <= r[SHIP] < hi for r in rows)
    return {"ok": ok and parts == set(range(10)), "partitions": len(parts)}


def _check_join(res):
    li, od = Dataset(res.cluster, res.plans[0]), Dataset(res.cluster, res.plans[1])
    splits = co_split_by_key(res.cluster, (od, "orderkey"), (li, "orderkey"))
    stats = IoStats()
    joined = hash_join_cogrouped(splits, od, "orderkey", li, "orderkey", stats=stats)
    orows = [r for v in stored_records(res, 1).values() for r in v]
    lrows = [r for v in stored_records(res, 0).values() for r in v]
    oracle = nested_loop_join(orows, 0, lrows, 0) if len(orows) * len(lrows) <= 4e8 else None
    ok = stats.shuffle_bytes == 0 and (oracle is None or sorted(joined) == sorted(oracle))
    return {"ok": ok, "joined": len(joined), "splits": len(splits), "shuffle_bytes": stats.shuffle_bytes}


def _check_flexible(res):
    ds = Dataset(res.cluster, res.plan)
    per_replica = defaultdict(int)  # partition -> bytes of one replica set
    for f in ds.files:
        rep = ds.label_of(f, "replicate1") or ds.label_of(f, "replicate2")
        if rep == "1":
            per_replica[ds.label_of(f, "partition1")] += res.cluster.stat(f).size
    hot = per_replica.get("0", 0)
    cold = sum(v for k, v in per_replica.items() if k != "0")
    analytic = 10 * hot + 2 * cold
    stored = _size(res, ds.files)
    uniform = 3 * (hot + cold)
    frac = hot / (hot + cold) if hot + cold else 0
    return {"ok": stored == analytic and (stored < uniform) == (frac < 1 / 8), "stored": stored,
            "analytic": analytic, "uniform3": uniform, "hot_fraction": round(frac, 4)}


def _ec_bytes(res):
    stripes = read_stripes(res.cluster)
    data = sum(res.cluster.stat(f).size for sd in stripes for f in sd.data)
    parity = sum(res.cluster.stat(f).size for sd in stripes for f in sd.parity)
    return stripes, data, parity


def _check_erasure(res):
    stripes, data, parity = _ec_bytes(res)
    shapes = Counter((sd.k, sd.m) for sd in stripes)
    return {"ok": bool(stripes) and (data + parity) * 10 == data * 13 and set(shapes) == {(10, 3)},
            "stripes": len(stripes), "data_bytes": data, "parity_bytes": parity,
            "overhead": round((data + parity) / data, 6) if data else None}


def _check_flex_ec(res):
    stripes, data, parity = _ec_bytes(res)
    ds = Dataset(res.cluster, res.plan)
    ok = True
    for sd in stripes:
        hot = ds.label_of(sd.data[0], "partition1") == "0"
        ok &= sd.m == 3 and sd.k <= (5 if hot else 10)
    expected = sum(sd.m * sd.width for sd in stripes)
    return {"ok": ok and parity == expected, "stripes": len(stripes), "data_bytes": data, "parity_bytes": parity}


def _check_mixed(res):
    ds = Dataset(res.cluster, res.plan)
    stripes, data, parity = _ec_bytes(res)
    hot = [f for f in ds.files if ds.label_of(f, "partition1") == "0"]
    copies = Counter((ds.label_of(f, "input"), ds.label_of(f, "chunk1")) for f in hot)
    cold_parts = {ds.label_of(f, "partition1") for sd in stripes for f in sd.data}
    ok = bool(hot) and all(c == 10 for c in copies.values()) and "0" not in cold_parts and bool(stripes)
    return {"ok": ok, "hot_files": len(hot), "stripes": len(stripes), "parity_bytes": parity}


def _violations(rows):
    return {"inject_dc": max(5, rows // 1000)}


SCENARIOS: dict[str, Scenario] = {s.id: s for s in [
    Scenario("fd-check", "quarantine functional-dependency violations (shipdate -> linestatus)",
             [("lineitem", "fd_check.ingest")], _check_violations("fd"),
             {"lineitem": lambda n: {"inject_fd": max(5, n // 1000)}}),
    Scenario("dc-check", "quarantine denial-constraint violations", [("lineitem", "dc_check.ingest")],
             _check_violations("dc"), {"lineitem": _violations}),
    Scenario("dc-repair", "clamp violating discounts during ingestion", [("lineitem", "dc_repair.ingest")],
             _check_dc_repair, {"lineitem": _violations}),
    Scenario("bernoulli", "full copy plus a Bernoulli sample", [("lineitem", "bernoulli.ingest")], _check_bernoulli),
    Scenario("reservoir", "full copy plus a per-file reservoir sample", [("lineitem", "reservoir.ingest")],
             _check_reservoir),
    Scenario("stratified-local", "per-file stratified sample", [("lineitem", "stratified_local.ingest")],
             _check_stratified("local")),
    Scenario("stratified-global", "stratified sample over the whole dataset",
             [("lineitem", "stratified_global.ingest")], _check_stratified("global")),
    Scenario("per-replica-layouts", "three replicas in three layouts", [("lineitem", "per_replica_layouts.ingest")],
             _check_layouts),
    Scenario("hybrid-replicas", "blocks dealt over three layouts, each stored three times",
             [("lineitem", "hybrid_replicas.ingest")], _check_hybrid),
    Scenario("content-partition", "ten shipdate ranges", [("lineitem", "content_partition.ingest")], _check_ranges),
    Scenario("content-placement", "co-partitioned, co-located orders and lineitem",
             [("lineitem", "placement_lineitem.ingest"), ("orders", "placement_orders.ingest")], _check_join),
    Scenario("flexible-replication", "hot range x10, the rest x2", [("lineitem", "flexible_replication.ingest")],
             _check_flexible),
    Scenario("erasure", "Reed-Solomon (10,3) stripes", [("lineitem", "erasure.ingest")], _check_erasure,
             overrides=lambda per_file: {"rows250": {"rows": max(1, -(-per_file // 10))}}),
    Scenario("flexible-erasure", "(5,3) for the hot range, (10,3) elsewhere", [("lineitem", "flexible_erasure.ingest")],
             _check_flex_ec),
    Scenario("mixed-replication-erasure", "hot range x10 replicas, the rest (10,3) stripes",
             [("lineitem", "mixed_replication_erasure.ingest")], _check_mixed),
]}

TABLE_PREFIX = {"lineitem": "l", "orders": "o", "customer": "c"}


def source_files(meta: GeneratedData, cluster) -> list[SourceFile]:
    prefix = TABLE_PREFIX[meta.table]
    return [SourceFile(f"{prefix}{i}", cluster.nodes[i % len(cluster.nodes)], path=p)
            for i, p in enumerate(meta.files)]


def run_scenario(sid: str, workdir, *, rows: int = 10_000, files: int = 4, nodes: int = 3,
                 pool_size: int = 1, seed: int = 0, optimize: bool = True,
                 config: Optional[RuntimeConfig] = None, registry=None, strict: bool = False) -> ScenarioResult:
    if sid not in SCENARIOS:
        raise KeyError(f"unknown scenario {sid!r}; known: {', '.join(SCENARIOS)}")
    sc = SCENARIOS[sid]
    work = Path(workdir)
    registry = registry or default_registry()
    if sc.overrides is not None:
        # sized so each input file yields exactly ten blocks
        registry = registry.override(**sc.overrides(rows // max(1, files)))
    cluster = create_cluster(max(nodes, sc.min_nodes), work / "cluster", force=True)
    data, plans, reports = {}, [], []
    for table, program in sc.programs:
        if table not in data:
            extra = sc.data.get(table, {})
            if callable(extra):
                extra = extra(rows)
            n = rows if table == "lineitem" else max(1, rows // 4)
            data[table] = gen_data(work / "data" / table, table, n, files, seed, **extra)
        plan = compile_text((PROGRAM_DIR / program).read_text(), registry, plan_id=f"{sid}-{table}")
        if optimize:
            plan, _ = optimize_plan(plan)
        cfg = config or RuntimeConfig(pool_size=pool_size, seed=seed)
        reports.append(execute_plan(plan, source_files(data[table], cluster), cluster, cfg))
        plans.append(plan)
    res = ScenarioResult(sid, cluster, plans, reports, data)
    res.checks = sc.check(res)
    if strict and not res.ok:
        raise ScenarioFailed(sid, res.checks)
    return res
