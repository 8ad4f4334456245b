import pytest

from ingestplan.core import Materialize, OpSpec, pipelined_blocks
from ingestplan.lang import compile_text, load_program, render_plan
from ingestplan.optimizer import (BudgetExceeded, InvalidRewrite, Rule, optimize_plan, rule_filter_first,
                                  rule_pipeline, rule_reorder)

LOG = load_program("log_analytics")


def kinds(stage):
    return [o.kind for o in stage.ops]


def test_empty_rule_set_is_identity():
    plan = compile_text(LOG)
    out, trace = optimize_plan(plan, [])
    assert trace == [] and render_plan(out) == render_plan(plan)


def test_reorder_moves_replicate_after_chunk():
    plan = compile_text("s1 = SELECT * FROM input USING parser REPLICATE BY 2;\n"
                        "s2 = FORMAT s1 CHUNK BY 100mbBlocks;\n"
                        "s3 = STORE s2 UPLOAD TO hdfsStorage;\n"
                        "CREATE STAGE a USING s1,s2,s3;\n")
    out, trace = optimize_plan(plan, [rule_reorder])
    assert kinds(out.stages["a"])[:3] == ["parse", "chunk", "replicate"]
    assert trace and all(t[0] == "reorder" for t in trace)


def test_reorder_respects_stage_boundaries():
    out, _ = optimize_plan(compile_text(LOG), [rule_reorder])
    # replicate1 feeds the stage predicates of b and c, so it stays the last op of a
    assert kinds(out.stages["a"]) == ["parse", "replicate"]
    assert kinds(out.stages["b"]) == ["chunk", "replicate"]


def _project_then_filter(attrs, pred):
    plan = compile_text(f"s1 = SELECT {attrs} FROM input USING parser WHERE filter(\"{pred}\");\n"
                        "s2 = FORMAT s1 CHUNK BY 100mbBlocks SERIALIZE AS pax;\n"
                        "s3 = STORE s2 UPLOAD TO hdfsStorage;\n")
    chain = plan.stages["s1"].chain
    fi = next(i for i, n in enumerate(chain) if isinstance(n, OpSpec) and n.kind == "filter")
    pi = next(i for i, n in enumerate(chain) if isinstance(n, OpSpec) and n.kind == "project")
    chain[fi], chain[pi] = chain[pi], chain[fi]
    assert kinds(plan.stages["s1"]) == ["parse", "project", "filter"]
    return plan


def test_filter_first_when_filter_reduces_more():
    wide = "orderkey,partkey,suppkey,linenumber,quantity,extendedprice,discount,tax,returnflag," \
           "linestatus,shipdate,commitdate,receiptdate,shipinstruct"
    out, trace = optimize_plan(_project_then_filter(wide, "quantity<6"), [rule_filter_first])
    assert kinds(out.stages["s1"]) == ["parse", "filter", "project"] and len(trace) == 1


def test_project_stays_first_when_it_reduces_more():
    out, trace = optimize_plan(_project_then_filter("orderkey,quantity", "quantity<46"), [rule_filter_first])
    assert kinds(out.stages["s1"]) == ["parse", "project", "filter"] and trace == []


def test_filter_already_first_is_noop():
    plan = compile_text('s1 = SELECT orderkey,quantity FROM input USING parser WHERE filter("quantity<6");\n'
                        "s2 = FORMAT s1 CHUNK BY 100mbBlocks SERIALIZE AS pax;\n"
                        "s3 = STORE s2 UPLOAD TO hdfsStorage;\n")
    _, trace = optimize_plan(plan, [rule_filter_first])
    assert trace == []


def markers_after(stage):
    """Names of ops immediately followed by a marker."""
    out = []
    for a, b in zip(stage.chain, stage.chain[1:]):
        if isinstance(a, OpSpec) and isinstance(b, Materialize):
            out.append(a.kind)
    return out


def test_pipeline_rule_marker_table():
    plan = compile_text('s1 = SELECT * FROM input USING parser WHERE filter("quantity<20");\n'
                        "s2 = FORMAT s1 PARTITION BY hash CHUNK BY 100mbBlocks SERIALIZE AS pax;\n"
                        "s3 = STORE s2 UPLOAD TO hdfsStorage;\n"
                        "CREATE STAGE a USING s1,s2,s3;\n")
    out, _ = optimize_plan(plan, [rule_pipeline])
    after = markers_after(out.stages["a"])
    # parse|filter and chunk|serialize lose their markers; partition|chunk (Record->Block) keeps it
    assert after == ["partition"]
    blocks = pipelined_blocks(out)
    assert ["parse1", "filter1", "partition1"] in blocks
    assert any(set(b) >= {"chunk1", "serialize1"} for b in blocks)


def test_log_plan_five_blocks():
    out, _ = optimize_plan(compile_text(LOG))
    assert len(pipelined_blocks(out)) == 5
    assert out.version == "2"


def test_budget_exceeded():
    with pytest.raises(BudgetExceeded):
        optimize_plan(compile_text(LOG), budget=1)


def test_buggy_rule_rejected():
    def check(plan, e):
        return isinstance(e.node, OpSpec) and e.node.kind == "parse"

    def apply(plan, e):
        out = plan.copy()
        del out.stages[e.stage].chain[e.index]
        return out

    with pytest.raises(InvalidRewrite):
        optimize_plan(compile_text(LOG), [Rule("drop_parse", check, apply)])


def test_optimizer_is_idempotent():
    once, _ = optimize_plan(compile_text(LOG))
    twice, trace = optimize_plan(once)
    assert trace == [] and render_plan(twice) == render_plan(once)
