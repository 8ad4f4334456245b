import pytest

from ingestplan.access import Dataset, UnknownPlan, read_records
from ingestplan.cluster import create_cluster, digest
from ingestplan.datagen import gen_data
from ingestplan.lang import compile_text, load_program
from ingestplan.oplib import layouts as L
from ingestplan.optimizer import optimize_plan
from ingestplan.recovery import (ErasureRecovery, NoHealthyReplica, ReplicationRecovery,
                                 TransformationRecovery, daemon_run, default_catalog, detect, read_stripes,
                                 recover_all)
from ingestplan.runtime import RuntimeConfig, execute_plan
from ingestplan.scenarios import source_files

REPLICATED = ("s1 = SELECT * FROM input USING parser;\n"
              "s2 = FORMAT s1 CHUNK BY rows250 SERIALIZE AS pax;\n"
              "s3 = STORE s2 UPLOAD TO hdfsStorage;\n")
TWO_PAX = ("s1 = SELECT * FROM input USING parser;\n"
           "s2 = FORMAT s1 CHUNK BY rows250;\n"
           "s3 = SELECT * FROM s2 REPLICATE BY 2;\n"
           "s4 = FORMAT s3 SERIALIZE AS pax;\n"
           "s5 = STORE s4 LOCATE USING disjointLocator UPLOAD TO hdfsStorage;\n")


def ingest(tmp_path, text, nodes=3, rows=1000, files=1, plan_id="plan"):
    cl = create_cluster(nodes, tmp_path / "c")
    meta = gen_data(tmp_path / "d", "lineitem", rows, files, 0)
    plan = optimize_plan(compile_text(text, plan_id=plan_id))[0]
    execute_plan(plan, source_files(meta, cl), cl, RuntimeConfig(pool_size=1))
    return cl, plan


def test_healthy_cluster_detects_nothing(tmp_path):
    cl, plan = ingest(tmp_path, REPLICATED)
    assert detect(cl, "plan", default_catalog(cl), plan) == {}


def test_unknown_plan(tmp_path):
    cl, plan = ingest(tmp_path, REPLICATED)
    with pytest.raises(UnknownPlan):
        detect(cl, "nope", default_catalog(cl))


def test_replication_recovery(tmp_path):
    cl, plan = ingest(tmp_path, REPLICATED)
    f = Dataset(cl, plan).files[0]
    before = cl.stat(f).digest
    cl.corrupt_block(f, 0)
    found = ReplicationRecovery().detect(cl, plan)
    assert [x[0] for x in found] == [f] and len(found[0][1]) == 2
    ev = ReplicationRecovery().recover(cl, plan, f, found[0][1])
    assert ev["decoded"] == 0
    sf = cl.stat(f)
    assert len(sf.nodes) == 3 and set(cl.replica_health(f).values()) == {"ok"}
    assert digest(cl.get_block(f)) == before


def test_replication_needs_a_healthy_copy(tmp_path):
    cl, plan = ingest(tmp_path, REPLICATED)
    f = Dataset(cl, plan).files[0]
    for i in range(3):
        cl.corrupt_block(f, i)
    with pytest.raises(NoHealthyReplica):
        ReplicationRecovery().recover(cl, plan, f, [])
    events = recover_all(cl, default_catalog(cl, ["plan"]), {"plan": plan})
    assert [e["file"] for e in events] == [f] and events[0]["mechanism"] is None


def test_transformation_from_other_layout(tmp_path):
    cl, plan = ingest(tmp_path, load_program("per_replica_layouts"), rows=1000)
    ds = Dataset(cl, plan)
    pax = ds.filter_replica_by_layout("pax").files[0]
    want = read_records(cl, plan, pax)
    cl.corrupt_block(pax, 0)
    (hit,) = [x for x in TransformationRecovery().detect(cl, plan) if x[0] == pax]
    assert len(hit[1]) == 2  # the srow and rcf siblings
    ev = TransformationRecovery().recover(cl, plan, pax, hit[1])
    assert ev["decoded"] == 1
    assert read_records(cl, plan, pax) == want
    assert L.read_header(cl.get_block(pax)).layout is L.Layout.PAX


def test_transformation_same_layout_byte_equal(tmp_path):
    cl, plan = ingest(tmp_path, TWO_PAX)
    f = Dataset(cl, plan).files[0]
    original = cl.get_block(f)
    for i in range(len(cl.stat(f).nodes)):
        cl.corrupt_block(f, i)
    (hit,) = [x for x in TransformationRecovery().detect(cl, plan) if x[0] == f]
    TransformationRecovery().recover(cl, plan, f, hit[1])
    assert cl.get_block(f) == original


def test_transformation_sibling_also_broken(tmp_path):
    cl, plan = ingest(tmp_path, TWO_PAX)
    ds = Dataset(cl, plan)
    f = ds.files[0]
    sib = TransformationRecovery().siblings(ds, f)
    for name in [f] + sib:
        for i in range(len(cl.stat(name).nodes)):
            cl.corrupt_block(name, i)
    with pytest.raises(NoHealthyReplica):
        TransformationRecovery().recover(cl, plan, f, sib)


def test_erasure_detect_lists_survivors(tmp_path):
    cl, plan = ingest(tmp_path, load_program("erasure"), nodes=5, rows=2500)
    (sd,) = read_stripes(cl)
    assert (sd.k, sd.m) == (10, 3)
    victim = sd.members[4]
    cl.corrupt_block(victim, 0)
    found = dict(ErasureRecovery().detect(cl, plan))
    assert sorted(found[victim]) == sorted(g for g in sd.members if g != victim)
    ErasureRecovery().recover(cl, plan, victim, found[victim])
    assert digest(cl.get_block(victim)) == cl.stat(victim).digest


def test_daemon_cycles(tmp_path):
    cl, plan = ingest(tmp_path, load_program("erasure"), nodes=5, rows=2500)
    cat = default_catalog(cl)
    assert daemon_run(cl, cat, once=True) == []
    (sd,) = read_stripes(cl)
    cl.corrupt_block(sd.members[0], 0)
    events = daemon_run(cl, cat, once=True)
    assert len(events) == 1 and events[0]["mechanism"] == "erasure"
    assert daemon_run(cl, cat, interval=0, max_cycles=2) == []


def test_kill_node_within_parity_budget(tmp_path):
    cl, plan = ingest(tmp_path, load_program("erasure"), nodes=5, rows=2500)
    (sd,) = read_stripes(cl)
    held = {n: [g for g in sd.members if cl.stat(g).nodes[0] == n] for n in cl.nodes}
    victim = next(n for n, gs in held.items() if 0 < len(gs) <= sd.m)
    cl.kill_node(victim)
    daemon_run(cl, default_catalog(cl), once=True)
    for g in sd.members:
        assert digest(cl.get_block(g)) == cl.stat(g).digest


def test_default_catalog_requires_plans(tmp_path):
    cl = create_cluster(1, tmp_path / "c")
    with pytest.raises(ValueError):
        daemon_run(cl, default_catalog(cl), once=True)
