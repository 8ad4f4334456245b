import pickle
from collections import Counter

import pytest

from ingestplan.access import Dataset, read_records
from ingestplan.cluster import create_cluster
from ingestplan.core import Granularity as G, IngestItem, Label, Schema
from ingestplan.datagen import gen_data
from ingestplan.lang import compile_text, load_program
from ingestplan.oplib.operators import Reservoir, Serializer
from ingestplan.optimizer import optimize_plan
from ingestplan.runtime import (InputsLost, NotSkippable, ParallelModeRejected, RuntimeConfig, SourceFile, execute_plan,
                                reference_interpret, run_parallel_mode, shuffle_via_dfs)
from ingestplan.scenarios import source_files

SIMPLE = ("s1 = SELECT * FROM input USING parser;\n"
          "s2 = FORMAT s1 PARTITION BY hash CHUNK BY rows250 SERIALIZE AS pax;\n"
          "s3 = STORE s2 UPLOAD TO hdfsStorage;\n")


def stored_records(cl, plan):
    return {f: read_records(cl, plan, f) for f in Dataset(cl, plan).files}


def plan_of(text):
    return optimize_plan(compile_text(text))[0]


def blocks(n):
    sch = Schema.parse("a:int64,b:string")
    return [IngestItem(G.BLOCK, tuple((i * 10 + j, f"v{j}") for j in range(50)), (Label("chunk", str(i), 0, True, "chunk"),), sch)
            for i in range(n)]


def test_parallel_mode_matches_serial():
    items = blocks(8)
    serial = run_parallel_mode(lambda: Serializer(layout="pax"), items, 1)
    par = run_parallel_mode(lambda: Serializer(layout="pax"), items, 4)
    assert [it.payload for it in par] == [it.payload for it in serial]
    assert par == serial


def test_stateful_parallel_rejected():
    class Bad(Reservoir):
        parallel_mode = True

    with pytest.raises(ParallelModeRejected):
        run_parallel_mode(lambda: Bad(capacity=2), blocks(2), 2)


def test_shuffle_mod_rule_and_conservation(tmp_path):
    cl = create_cluster(2, tmp_path / "c")
    sch = Schema.parse("a:int64")
    items = {n: [IngestItem(G.RECORD, (i,), (Label("g", str(i % 10), 0, True, "partition"),), sch)
                 for i in range(k, 100, 2)] for k, n in enumerate(cl.nodes)}
    out, nbytes = shuffle_via_dfs(items, cl, lambda it: it.label("g"), "t")
    assert nbytes > 0
    assert {it.label("g") for it in out["node-0"]} == {"0", "2", "4", "6", "8"}
    assert {it.label("g") for it in out["node-1"]} == {"1", "3", "5", "7", "9"}
    before = Counter(it.payload for v in items.values() for it in v)
    assert Counter(it.payload for v in out.values() for it in v) == before


def test_shuffle_recopies_corrupt_part(tmp_path):
    cl = create_cluster(1, tmp_path / "c")
    sch = Schema.parse("a:int64")
    items = {"node-0": [IngestItem(G.RECORD, (i,), (Label("g", "0", 0, True, "partition"),), sch)
                        for i in range(5)]}

    def corrupt(base):
        p = base / "group-0" / "part-node-0"
        p.write_bytes(b"garbage")

    out, _ = shuffle_via_dfs(items, cl, lambda it: it.label("g"), "t", corrupt_hook=corrupt)
    assert sorted(it.payload for it in out["node-0"]) == [(i,) for i in range(5)]


def test_zero_inputs(tmp_path):
    cl = create_cluster(2, tmp_path / "c")
    rep = execute_plan(plan_of(SIMPLE), [], cl, RuntimeConfig(pool_size=1))
    assert rep.manifest == []


def test_log_plan_replica_families(tmp_path):
    cl = create_cluster(2, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 2000, 2, 0)
    rep = execute_plan(plan_of(load_program("log_analytics")), source_files(meta, cl), cl,
                       RuntimeConfig(pool_size=1))
    ds = Dataset(cl, plan_of(load_program("log_analytics")))
    fams = {lay: len(ds.filter_replica_by_layout(lay)) for lay in ("srow", "rcf", "pax")}
    assert all(fams.values()), fams
    assert sum(fams.values()) == len(rep.manifest)


def test_matches_reference_interpreter(tmp_path):
    cl = create_cluster(3, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 1500, 3, 2)
    plan = plan_of(load_program("log_analytics"))
    execute_plan(plan, source_files(meta, cl), cl, RuntimeConfig(pool_size=2))
    files = [(s.source_id, open(s.path, "rb").read()) for s in source_files(meta, cl)]
    ref = reference_interpret(plan, files)
    got = stored_records(cl, plan)
    assert set(got) == set(ref)
    for name in ref:
        assert Counter(got[name]) == Counter(ref[name])


def test_deterministic_manifest(tmp_path):
    meta = gen_data(tmp_path / "d", "lineitem", 1000, 2, 0)
    out = []
    for i in range(2):
        cl = create_cluster(1, tmp_path / f"c{i}")
        out.append(execute_plan(plan_of(load_program("log_analytics")), source_files(meta, cl), cl,
                                RuntimeConfig(pool_size=1)).normalized_manifest())
    assert out[0] == out[1]


def test_retry_then_success(tmp_path):
    cl = create_cluster(1, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 500, 1, 0)
    base = execute_plan(plan_of(SIMPLE), source_files(meta, cl), cl, RuntimeConfig(pool_size=1))
    cl2 = create_cluster(1, tmp_path / "c2")
    rep = execute_plan(plan_of(SIMPLE), source_files(meta, cl2), cl2,
                       RuntimeConfig(pool_size=1, inject_failures={"partition1": 2}))
    assert len(rep.events_of("retry")) == 2 and rep.events_of("dummy") == []
    assert rep.normalized_manifest() == base.normalized_manifest()


def test_three_failures_use_dummy(tmp_path):
    cl = create_cluster(1, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 500, 1, 0)
    text = SIMPLE.replace("s3 = STORE s2 UPLOAD TO hdfsStorage;\n", "") + (
        "s3 = STORE s2 UPLOAD TO hdfsStorage;\n"
        "CREATE STAGE a USING s1,s2;\n"
        "CHAIN STAGE b TO a USING s3 WHERE l_partition1=-1;\n")
    rep = execute_plan(plan_of(text), source_files(meta, cl), cl,
                       RuntimeConfig(pool_size=1, inject_failures={"partition1": 3}))
    assert len(rep.events_of("dummy")) == 1
    # the downstream stage selects on the -1 label and still sees every block
    assert rep.manifest and all("_-1_" in e["name"] for e in rep.manifest)
    assert sum(len(v) for v in stored_records(cl, plan_of(text)).values()) == 500


@pytest.mark.parametrize("op", ["parse1", "chunk1", "serialize1"])
def test_granularity_changing_op_cannot_be_skipped(tmp_path, op):
    cl = create_cluster(1, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 200, 1, 0)
    with pytest.raises(NotSkippable, match=op):
        execute_plan(plan_of(SIMPLE), source_files(meta, cl), cl, RuntimeConfig(inject_failures={op: 3}))


def _remote_inputs(cl, meta):
    srcs = []
    for i, p in enumerate(meta.files):
        name = f"raw{i}"
        cl.put_block(name, open(p, "rb").read(), 3)
        srcs.append(SourceFile(f"l{i}", cl.nodes[i % len(cl.nodes)], cluster_name=name))
    return srcs


def test_node_failure_reschedules(tmp_path):
    meta = gen_data(tmp_path / "d", "lineitem", 1200, 3, 0)
    plan = plan_of(SIMPLE)
    a = create_cluster(3, tmp_path / "a")
    base = execute_plan(plan, _remote_inputs(a, meta), a, RuntimeConfig(pool_size=1))
    b = create_cluster(3, tmp_path / "b")
    rep = execute_plan(plan, _remote_inputs(b, meta), b,
                       RuntimeConfig(pool_size=1, fail_node=("node-1", "s2")))
    assert rep.events_of("node_failure") and rep.attempts == 2
    strip = lambda m: sorted((n, s, d) for n, s, d in m if not n.startswith("raw"))
    assert strip(rep.normalized_manifest()) == strip(base.normalized_manifest())


def test_local_inputs_lost(tmp_path):
    cl = create_cluster(3, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 300, 3, 0)
    with pytest.raises(InputsLost):
        execute_plan(plan_of(SIMPLE), source_files(meta, cl), cl,
                     RuntimeConfig(pool_size=1, fail_node=("node-1", "s2")))


def test_kill_after_finish_no_effect(tmp_path):
    cl = create_cluster(3, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", 300, 3, 0)
    execute_plan(plan_of(SIMPLE), source_files(meta, cl), cl, RuntimeConfig(pool_size=1))
    cl.kill_node("node-1")
    assert sum(len(v) for v in stored_records(cl, plan_of(SIMPLE)).values()) == 300
