"""Post-ingestion fault tolerance: detect/recover UDFs, stripe catalog and the polling daemon."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .access import (Dataset, UnknownPlan, decode_name, fetch, list_plans, load_plan, plan_schemas,
                     schema_for)
from .cluster import AllReplicasFailed, ClusterError, digest
from .core import IngestError, IngestPlan
from .erasure import rs_decode
from .oplib import layouts as L
from .oplib.operators import NAME_NEUTRAL_KINDS

log = logging.getLogger(__name__)
_catalog_lock = threading.Lock()


class NoHealthyReplica(IngestError):
    pass


class RecoveryFailed(IngestError):
    pass


# -- stripe catalog ---------------------------------------------------------------------

@dataclass(frozen=True)
class StripeDescriptor:
    stripe_id: str
    data: tuple
    parity: tuple
    width: int  # padded length shared by every member
    lengths: tuple = ()  # true data-block lengths

    def __post_init__(self):
        k, m = len(self.data), len(self.parity)
        if k < 1 or m < 1 or k + m > 255:
            raise ValueError(f"bad stripe shape k={k}, m={m}")

    @property
    def k(self) -> int:
        return len(self.data)

    @property
    def m(self) -> int:
        return len(self.parity)

    @property
    def members(self) -> tuple:
        return self.data + self.parity

    def line(self) -> str:
        return (f"STRIPE|{self.stripe_id}|{self.k}|{self.m}|{self.width}|data:{','.join(self.data)}"
                f"|parity:{','.join(self.parity)}|lens:{','.join(map(str, self.lengths))}")

    @classmethod
    def parse(cls, line: str) -> "StripeDescriptor":
        f = line.rstrip("\n").split("|")
        if f[0] != "STRIPE" or len(f) < 7:
            raise ValueError(f"bad stripe record {line!r}")
        data = tuple(x for x in f[5][len("data:"):].split(",") if x)
        parity = tuple(x for x in f[6][len("parity:"):].split(",") if x)
        lens = tuple(int(x) for x in f[7][len("lens:"):].split(",") if x) if len(f) > 7 else ()
        sd = cls(f[1], data, parity, int(f[4]), lens or tuple(int(f[4]) for _ in data))
        if (sd.k, sd.m) != (int(f[2]), int(f[3])):
            raise ValueError(f"stripe {f[1]}: k/m fields disagree with member lists")
        return sd


def catalog_path(cluster) -> Path:
    return cluster.dfs / "stripes.catalog"


def append_stripe(cluster, sd: StripeDescriptor):
    with _catalog_lock:
        with open(catalog_path(cluster), "a", encoding="utf-8") as fh:
            fh.write(sd.line() + "\n")


def read_stripes(cluster) -> list[StripeDescriptor]:
    p = catalog_path(cluster)
    if not p.exists():
        return []
    out = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            sd = StripeDescriptor.parse(line)
            out[sd.stripe_id] = sd
    return list(out.values())


# -- health ----------------------------------------------------------------------------

def failed_replicas(cluster, name: str) -> tuple[list[str], list[str]]:
    """(healthy nodes, failed nodes) for one file."""
    health = cluster.replica_health(name)
    ok = [n for n, s in health.items() if s == "ok"]
    return ok, [n for n, s in health.items() if s != "ok"]


def _plan_files(cluster, plan: IngestPlan) -> list[str]:
    return Dataset(cluster, plan, include_parity=True).files


# -- recovery UDFs ---------------------------------------------------------------------

class RecoveryUDF:
    name = "udf"

    def detect(self, cluster, plan: IngestPlan) -> list[tuple[str, list[str]]]:
        raise NotImplementedError

    def recover(self, cluster, plan: IngestPlan, failed: str, recovery_set: Sequence[str]) -> dict:
        raise NotImplementedError


class ReplicationRecovery(RecoveryUDF):
    """Bitwise replicas of the same file: copy a healthy one back to full strength."""

    name = "replication"

    def detect(self, cluster, plan):
        out = []
        for f in _plan_files(cluster, plan):
            ok, bad = failed_replicas(cluster, f)
            if bad:
                out.append((f, [f"{f}@{n}" for n in ok]))
        return out

    def recover(self, cluster, plan, failed, recovery_set):
        sf = cluster.stat(failed)
        target = len(sf.nodes)
        ok, _ = failed_replicas(cluster, failed)
        if not ok:
            raise NoHealthyReplica(f"no healthy copy of {failed}")
        sf = cluster.set_replication(failed, target)
        return {"mechanism": self.name, "file": failed, "replicas": len(sf.nodes), "decoded": 0}


def _slot_values(ds: Dataset, name: str) -> Optional[dict]:
    p = ds._path_of(name, include_parity=False)
    if p is None:
        return None
    values = decode_name(name)
    return {s.op_name: v for s, v in zip(p.slots, values)}, p


class TransformationRecovery(RecoveryUDF):
    """Rebuild a lost file from a replica that holds the same records in another layout."""

    name = "transformation"

    @staticmethod
    def _record_key(ds: Dataset, name: str):
        # identity of the records a file holds, ignoring which layout they went into
        sv = _slot_values(ds, name)
        if sv is None:
            return None
        vals, path = sv
        return tuple(sorted((s.op_name, vals[s.op_name]) for s in path.slots if s.kind not in NAME_NEUTRAL_KINDS))

    def siblings(self, ds: Dataset, failed: str) -> list[str]:
        key = self._record_key(ds, failed)
        if key is None:
            return []
        return [f for f in ds.files if f != failed and self._record_key(ds, f) == key]

    def detect(self, cluster, plan):
        ds = Dataset(cluster, plan)
        lost = [f for f in ds.files if not failed_replicas(cluster, f)[0]]
        if not lost:
            return []
        index: dict = {}
        for f in ds.files:
            k = self._record_key(ds, f)
            if k is not None:
                index.setdefault(k, []).append(f)
        out = []
        for f in lost:
            k = self._record_key(ds, f)
            out.append((f, [g for g in index.get(k, []) if g != f] if k is not None else []))
        return out

    def _target(self, ds: Dataset, failed: str) -> tuple[L.Layout, dict]:
        vals, path = _slot_values(ds, failed)
        layout, params = None, {}
        for s in path.slots:
            if s.kind == "serialize":
                op = ds.plan.op(s.op_name)
                layout = L.Layout.lookup(vals[s.op_name])
                params = op.params
        if layout is None:
            layout = L.Layout.STRING_ROWS
        return layout, params

    def recover(self, cluster, plan, failed, recovery_set):
        ds = Dataset(cluster, plan)
        layout, params = self._target(ds, failed)
        schemas = plan_schemas(plan)
        last = None
        for sib in recovery_set:
            try:
                data = fetch(cluster, sib)
            except (AllReplicasFailed, ClusterError) as exc:
                last = exc
                continue
            schema = schema_for(data, schemas)
            rows = L.deserialize(data, schema)
            kw = {}
            if layout is L.Layout.SORTED_ROW:
                kw["key"] = params.get("key") or schema.names[0]
            if "group_size" in params:
                kw["group_size"] = int(params["group_size"])
            rebuilt = L.serialize_rows(rows, schema, layout, **kw)
            if digest(rebuilt) != cluster.stat(failed).digest:
                last = RecoveryFailed(f"{sib} does not rebuild {failed}")
                continue
            cluster.restore_replica(failed, rebuilt)
            return {"mechanism": self.name, "file": failed, "source": sib, "decoded": 1,
                    "rows": len(rows)}
        if last is None:
            raise NoHealthyReplica(f"no replica holds the records of {failed} in another layout")
        raise NoHealthyReplica(f"{failed}: no usable sibling ({last})")


class ErasureRecovery(RecoveryUDF):
    name = "erasure"

    def _stripes(self, cluster):
        return {f: sd for sd in read_stripes(cluster) for f in sd.members}

    def detect(self, cluster, plan):
        stripes = self._stripes(cluster)
        out = []
        for f in _plan_files(cluster, plan):
            sd = stripes.get(f)
            if sd is None:
                continue
            ok, bad = failed_replicas(cluster, f)
            if bad and not ok:
                survivors = [g for g in sd.members if g != f and failed_replicas(cluster, g)[0]]
                out.append((f, survivors))
        return out

    def recover(self, cluster, plan, failed, recovery_set):
        sd = self._stripes(cluster).get(failed)
        if sd is None:
            raise RecoveryFailed(f"{failed} is not in any stripe")
        avail = {}
        for i, g in enumerate(sd.members):
            if g == failed or len(avail) >= sd.k:
                continue
            try:
                avail[i] = cluster.get_block(g)
            except (AllReplicasFailed, ClusterError):
                continue
        rebuilt = rs_decode(avail, sd.k, sd.m)
        idx = sd.members.index(failed)
        data = rebuilt[idx]
        cluster.restore_replica(failed, data)
        return {"mechanism": self.name, "file": failed, "stripe": sd.stripe_id, "decoded": 1}


# -- catalog and daemon ---------------------------------------------------------------------

@dataclass
class RecoverySpec:
    plan_id: str
    udf: RecoveryUDF
    interval: float = 1.0

    def detect(self, cluster, plan):
        return self.udf.detect(cluster, plan)

    def recover(self, cluster, plan, failed, recovery_set):
        return self.udf.recover(cluster, plan, failed, recovery_set)


class RecoveryCatalog:
    def __init__(self):
        self.specs: dict[str, list[RecoverySpec]] = {}

    def register(self, spec: RecoverySpec):
        self.specs.setdefault(spec.plan_id, []).append(spec)

    def __bool__(self):
        return bool(self.specs)

    def for_plan(self, plan_id: str) -> list[RecoverySpec]:
        try:
            return self.specs[plan_id]
        except KeyError:
            raise UnknownPlan(plan_id) from None


def default_catalog(cluster, plan_ids: Optional[Sequence[str]] = None) -> RecoveryCatalog:
    cat = RecoveryCatalog()
    for pid in plan_ids if plan_ids is not None else list_plans(cluster):
        for udf in (ReplicationRecovery(), TransformationRecovery(), ErasureRecovery()):
            cat.register(RecoverySpec(pid, udf))
    return cat


def detect(cluster, plan_id: str, catalog: RecoveryCatalog, plan: Optional[IngestPlan] = None):
    plan = plan or load_plan(cluster, plan_id)
    found = {}
    for spec in catalog.for_plan(plan_id):
        for f, rs in spec.detect(cluster, plan):
            found.setdefault(f, []).append((spec, rs))
    return found


def recover_all(cluster, catalog: RecoveryCatalog, plans: Optional[dict] = None) -> list[dict]:
    """One detect/recover pass over every cataloged plan; failures are logged, never raised."""
    events = []
    for pid in sorted(catalog.specs):
        plan = (plans or {}).get(pid) or load_plan(cluster, pid)
        for f, options in sorted(detect(cluster, pid, catalog, plan).items()):
            errors = []
            for spec, rs in options:
                try:
                    ev = spec.recover(cluster, plan, f, rs)
                    ev["plan"] = pid
                    events.append(ev)
                    break
                except (IngestError, OSError, ValueError) as exc:
                    errors.append(f"{spec.udf.name}: {exc}")
            else:
                log.warning("could not recover %s: %s", f, "; ".join(errors))
                events.append({"plan": pid, "file": f, "mechanism": None, "error": "; ".join(errors)})
    return events


def daemon_run(cluster, catalog: RecoveryCatalog, interval: float = 1.0,
               stop: Optional[threading.Event] = None, once: bool = False,
               plans: Optional[dict] = None, max_cycles: Optional[int] = None) -> list[dict]:
    if not catalog:
        raise ValueError("recovery catalog is empty")
    stop = stop or threading.Event()
    log_out, cycles = [], 0
    while not stop.is_set():
        events = recover_all(cluster, catalog, plans)
        for ev in events:
            ev["cycle"] = cycles
        log_out.extend(events)
        cycles += 1
        if once or (max_cycles is not None and cycles >= max_cycles):
            break
        stop.wait(interval)
    return log_out
