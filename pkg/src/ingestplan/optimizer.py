"""Rule-driven rewriting of ingestion plans.

A rule is a pair of functions over one node of the expression DAG: ``check``
reports whether the rewrite applies there, ``apply`` returns the rewritten plan.
The driver keeps applying the first applicable rule until none applies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .core import (Granularity, IngestError, IngestPlan, Materialize, OpExpr, OpSpec, validate_chain)
from .oplib.operators import COMMUTES_WITH_REPLICATE

G = Granularity


class BudgetExceeded(IngestError):
    pass


class InvalidRewrite(IngestError):
    pass


@dataclass(frozen=True)
class Rule:
    name: str
    check: Callable[[IngestPlan, OpExpr], bool]
    apply: Callable[[IngestPlan, OpExpr], IngestPlan]


def input_granularities(plan: IngestPlan) -> dict[str, Granularity]:
    """Granularity arriving at every operator, propagated from File inputs."""
    out_of_stage: dict[str, Granularity] = {}
    res = {}
    for sname in plan.topo_order():
        st = plan.stages[sname]
        g = G.FILE if st.is_source else out_of_stage[st.upstream[0]]
        for op in st.ops:
            res[op.name] = g
            g = op.prototype.output_granularity(g)
        out_of_stage[sname] = g
    return res


def check_plan(plan: IngestPlan, reference: Optional[IngestPlan] = None):
    """Raise InvalidRewrite if a stage chain no longer lines up or operators went missing."""
    if reference is not None:
        before = sorted(o.name for o in reference.ops())
        after = sorted(o.name for o in plan.ops())
        if before != after:
            raise InvalidRewrite(f"operator set changed: {before} -> {after}")
    egress: dict[str, Granularity] = {}
    for sname in plan.topo_order():
        st = plan.stages[sname]
        ins = {egress[u] for u in st.upstream} if st.upstream else {G.FILE}
        if len(ins) > 1:
            raise InvalidRewrite(f"stage {sname}: upstreams disagree on granularity")
        g = ins.pop()
        if st.ops:
            protos = [o.prototype for o in st.ops]
            bad = validate_chain(protos, g)
            if bad:
                raise InvalidRewrite(f"stage {sname}: {'; '.join(bad)}")
            for p in protos:
                g = p.output_granularity(g)
        egress[sname] = g


def _next_op(chain: list, index: int) -> Optional[int]:
    for j in range(index + 1, len(chain)):
        if isinstance(chain[j], OpSpec):
            return j
    return None


# -- reorder: push replication as late as possible inside a stage -------------------------

def _reorder_check(plan: IngestPlan, e: OpExpr) -> bool:
    if not isinstance(e.node, OpSpec) or e.node.kind != "replicate":
        return False
    chain = plan.stages[e.stage].chain
    j = _next_op(chain, e.index)
    if j is None:
        return False
    nxt = chain[j]
    if nxt.kind not in COMMUTES_WITH_REPLICATE:
        return False
    # never rewrite around a label predicate of this stage that names either operator
    st = plan.stages[e.stage]
    if any(p.op_name in (e.node.name, nxt.name) for p in st.predicates):
        return False
    return e.node.name != nxt.params.get("by")


def _reorder_apply(plan: IngestPlan, e: OpExpr) -> IngestPlan:
    out = plan.copy()
    chain = out.stages[e.stage].chain
    j = _next_op(chain, e.index)
    chain[e.index], chain[j] = chain[j], chain[e.index]
    return out


rule_reorder = Rule("reorder", _reorder_check, _reorder_apply)


# -- filter before project -----------------------------------------------------------------

PROBE_ROWS = 1000


def _probe_items(specs):
    from .core import IngestItem, Label
    from .datagen import TABLES, customer_rows, lineitem_rows, orders_rows

    needed = set()
    for spec in specs:
        needed |= set(spec.prototype.required_attrs())
    name = next((k for k, v in TABLES.items() if needed <= set(v.names)), None)
    if name is None:
        return None
    rows = {"lineitem": lambda: lineitem_rows(PROBE_ROWS, 7)[0], "orders": lambda: orders_rows(PROBE_ROWS, 7),
            "customer": lambda: customer_rows(PROBE_ROWS, 7)[0]}[name]()
    return [IngestItem(G.RECORD, r, (Label("probe", str(n), -2, False, "probe"),), TABLES[name])
            for n, r in enumerate(rows)]


def _volume(items) -> int:
    from .oplib.layouts import record_size
    return sum(record_size(it.payload, it.schema) for it in items)


def _probe_gain(plan: IngestPlan, stage: str, i: int, j: int) -> bool:
    """True when running chain[j] before chain[i] gives the same output from a smaller
    intermediate volume on a 1000-record probe. Ties keep the original order."""
    from .core import drain_operator

    first, second = plan.stages[stage].chain[i], plan.stages[stage].chain[j]
    items = _probe_items([first, second])
    if items is None:
        return False

    def run(order):
        cur, mid = items, None
        for spec in order:
            op = spec.instantiate()
            op.initialize()
            cur = drain_operator(op, cur)
            mid = _volume(cur) if mid is None else mid
        return mid, [(it.payload, tuple(sorted(it.labels))) for it in cur]

    vol_ab, out_ab = run([first, second])
    vol_ba, out_ba = run([second, first])
    return out_ab == out_ba and vol_ba < vol_ab


def _fp_check(plan: IngestPlan, e: OpExpr) -> bool:
    if not isinstance(e.node, OpSpec) or e.node.kind != "project":
        return False
    chain = plan.stages[e.stage].chain
    j = _next_op(chain, e.index)
    if j is None or chain[j].kind != "filter":
        return False
    kept = set(e.node.prototype.required_attrs())
    if not set(chain[j].prototype.required_attrs()) <= kept:
        return False
    return _probe_gain(plan, e.stage, e.index, j)


rule_filter_first = Rule("filter_before_project", _fp_check, _reorder_apply)


# -- pipelining: drop markers that do not separate granularity families ----------------------

def _pipeline_check(plan: IngestPlan, e: OpExpr) -> bool:
    if not isinstance(e.node, Materialize):
        return False
    st = plan.stages[e.stage]
    if e.index < 0:
        if not st.entry_marker or len(st.upstream) != 1 or not st.ops:
            return False
        consumer = st.ops[0]
    else:
        j = _next_op(st.chain, e.index)
        if j is None:
            return True
        consumer = st.chain[j]
    g_in = input_granularities(plan)[consumer.name]
    g_out = consumer.prototype.output_granularity(g_in)
    return g_in.family == g_out.family


def _pipeline_apply(plan: IngestPlan, e: OpExpr) -> IngestPlan:
    out = plan.copy()
    st = out.stages[e.stage]
    if e.index < 0:
        st.entry_marker = False
    else:
        del st.chain[e.index]
    return out


rule_pipeline = Rule("pipeline", _pipeline_check, _pipeline_apply)

DEFAULT_RULES = (rule_reorder, rule_filter_first, rule_pipeline)


def optimize_plan(plan: IngestPlan, rules: Sequence[Rule] = DEFAULT_RULES,
                  budget: Optional[int] = None) -> tuple[IngestPlan, list[tuple]]:
    """Rewrite to a fixpoint. Returns (plan, trace of (rule, stage, index, iteration))."""
    budget = budget if budget is not None else 10 * max(1, len(plan.ops()))
    trace = []
    current = plan
    while True:
        applied = False
        for rule in rules:
            for root in current.expressions():
                for e in root.walk():
                    if rule.check(current, e):
                        if len(trace) >= budget:
                            raise BudgetExceeded(f"no fixpoint after {budget} rewrites")
                        nxt = rule.apply(current, e)
                        check_plan(nxt, current)
                        trace.append((rule.name, e.stage, e.index, len(trace)))
                        current = nxt
                        applied = True
                        break
                if applied:
                    break
            if applied:
                break
        if not applied:
            break
    if trace:
        current.version = str(int(plan.version) + 1)
    return current, trace
