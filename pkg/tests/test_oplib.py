import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from ingestplan.cluster import create_cluster
from ingestplan.core import (Context, Granularity as G, Identity, IngestItem, MissingLabel,
                             OperatorFailure, Schema, UnknownAttribute, drain_operator)
from ingestplan.datagen import TABLES, gen_data, lineitem_rows
from ingestplan.oplib import layouts as L
from ingestplan.oplib.operators import (BadK, Bernoulli, ChunkBySize, CoLocator, CsvParse, DcDetect,
                                        DfsStore, DisjointLocator, FdDetect, Filter, HashPartition,
                                        ListPartition, Order, Project, RandomLocator, RangePartition,
                                        ReplicateK, Reservoir, Serializer, SinglePassRepair,
                                        SchemaArityMismatch, Stratified, fd_plurality_violations,
                                        reference_reservoir)

QD = Schema.parse("quantity:int64,discount:float64")


def rec(row, schema):
    return IngestItem(G.RECORD, tuple(row), (), schema)


def run(op, items, ctx=None):
    op.initialize(ctx or Context())
    return drain_operator(op, items)


def test_identity_labels_in_order():
    out = run(Identity(), [rec((i,), Schema.parse("a:int64")) for i in range(3)])
    assert [it.label("identity") for it in out] == ["0", "1", "2"]


# -- parse --------------------------------------------------------------------

def test_csv_three_lines():
    f = IngestItem(G.FILE, b"1|a\n2|b\n3|c\n")
    out = run(CsvParse(schema="a:int64,b:string"), [f])
    assert [it.payload for it in out] == [(1, "a"), (2, "b"), (3, "c")]
    assert [it.label("parse") for it in out] == ["0", "1", "2"]


def test_csv_bad_value_becomes_violation():
    ctx = Context()
    out = run(CsvParse(schema="a:int64,b:string"), [IngestItem(G.FILE, b"x|y\n")], ctx)
    assert out == []
    assert len(ctx.rejects) == 1 and ctx.rejects[0].records == ("x|y",)


def test_csv_wrong_schema_raises():
    with pytest.raises(OperatorFailure) as exc:
        run(CsvParse(schema="a:int64,b:string,c:string"), [IngestItem(G.FILE, b"1|a\n2|b\n")])
    assert isinstance(exc.value.cause, SchemaArityMismatch)


def test_csv_generated_file_matches_generator(tmp_path):
    meta = gen_data(tmp_path, "lineitem", 1000, 1, 3)
    rows, _, _ = lineitem_rows(1000, 3)
    text = b"".join(p.read_bytes() for p in sorted(tmp_path.glob("*.tbl")))
    out = run(CsvParse(table="lineitem"), [IngestItem(G.FILE, text)])
    assert [it.payload for it in out] == [tuple(r) for r in rows]
    assert meta is not None


# -- filter / project -------------------------------------------------------------

def test_filter_examples():
    f = Filter(predicate="quantity<3")
    assert run(f, [rec((5, 0.1), QD)]) == []
    assert len(run(Filter(predicate="quantity<3"), [rec((2, 0.1), QD)])) == 1
    with pytest.raises(OperatorFailure):
        run(Filter(predicate="nope<3"), [rec((2, 0.1), QD)])


def test_filter_selectivity_matches_scan():
    rows, _, _ = lineitem_rows(10000, 1)
    sch = TABLES["lineitem"]
    qi = sch.index("quantity")
    out = run(Filter(predicate="quantity<10"), [rec(r, sch) for r in rows])
    assert len(out) == sum(1 for r in rows if r[qi] < 10)


def test_project_basic():
    sch = Schema.parse("a:int64,b:string,c:float64")
    r = rec((1, "x", 2.5), sch)
    assert run(Project(attrs="a,b,c"), [r])[0].payload == r.payload
    one = run(Project(attrs="b"), [r])[0]
    assert one.payload == ("x",) and one.schema.names == ("b",)


ALL = ["a", "b", "c", "d"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(ALL), min_size=1, max_size=4, unique=True),
       st.data(), st.lists(st.integers(-5, 5), min_size=4, max_size=4))
def test_project_of_project(first, data, vals):
    second = data.draw(st.lists(st.sampled_from(first), min_size=1, max_size=len(first), unique=True))
    sch = Schema(tuple((a, "int64") for a in ALL))
    r = rec(vals, sch)
    mid = run(Project(name="p1", attrs=first), [r])
    twice = run(Project(name="p2", attrs=second), mid)[0]
    once = run(Project(attrs=second), [r])[0]
    assert twice.payload == once.payload and twice.schema == once.schema


# -- replication and sampling ----------------------------------------------------------

def test_replicate_k():
    blk = IngestItem(G.BLOCK, ((1,),), (), Schema.parse("a:int64"))
    assert [it.label("replicate") for it in run(ReplicateK(k=1), [blk])] == ["1"]
    assert [it.label("replicate") for it in run(ReplicateK(k=3), [blk])] == ["1", "2", "3"]
    with pytest.raises(BadK):
        ReplicateK(k=0).set_input([])


@given(st.integers(1, 5), st.integers(0, 20))
def test_replicate_count(k, n):
    items = [rec((i,), Schema.parse("a:int64")) for i in range(n)]
    assert len(run(ReplicateK(k=k), items)) == k * n


def test_bernoulli_extremes():
    items = [rec((i,), Schema.parse("a:int64")) for i in range(200)]
    zero = run(Bernoulli(p=0.0), items)
    assert [it.label("sample") for it in zero] == ["0"] * 200
    one = run(Bernoulli(p=1.0), items)
    assert Counter(it.label("sample") for it in one) == {"0": 200, "1": 200}


def test_bernoulli_replay_identical():
    items = [rec((i,), Schema.parse("a:int64")) for i in range(500)]
    a = run(Bernoulli(p=0.3, seed=7), items)
    b = run(Bernoulli(p=0.3, seed=7), items)
    assert a == b


def test_reservoir_small_inputs():
    items = [rec((i,), Schema.parse("a:int64")) for i in range(2)]
    assert len(run(Reservoir(capacity=5), items)) == 2
    assert run(Reservoir(capacity=5), []) == []


def test_reservoir_matches_reference():
    from ingestplan.core import derive_rng

    items = [rec((i,), Schema.parse("a:int64")) for i in range(5)]
    out = run(Reservoir(name="r", capacity=2, seed=11), items)
    ref = reference_reservoir(items, 2, derive_rng(11, "r", ()))
    assert [it.payload for it in out] == [it.payload for it in ref]


def strat_items(sizes):
    out = []
    for pid, n in enumerate(sizes):
        for i in range(n):
            base = rec((i,), Schema.parse("a:int64"))
            out.append(HashPartition(name="part").emit(base, pid))
    return out


def test_stratified_examples():
    one = run(Stratified(rate=1.0), strat_items([7]))
    assert len(one) == 7
    out = run(Stratified(rate=0.1), strat_items([90, 10]))
    assert Counter(it.label("part") for it in out) == {"0": 9, "1": 1}


def test_stratified_needs_stratum():
    with pytest.raises(OperatorFailure):
        run(Stratified(rate=0.5), [rec((1,), Schema.parse("a:int64"))])


# -- partitioning ----------------------------------------------------------------

def test_range_partition_pid():
    sch = Schema.parse("k:int64")
    assert run(RangePartition(key="k", boundaries=[10, 20]), [rec((15,), sch)])[0].label("partition") == "1"
    assert run(RangePartition(key="k", boundaries=[10, 20]), [rec((25,), sch)])[0].label("partition") == "2"


def test_hash_single_bucket():
    sch = Schema.parse("k:int64")
    out = run(HashPartition(key="k", buckets=1), [rec((i,), sch) for i in range(50)])
    assert {it.label("partition") for it in out} == {"0"}


def test_list_partition_other():
    sch = Schema.parse("m:string")
    out = run(ListPartition(key="m", lists=[["AIR", "RAIL"], ["SHIP"]]),
              [rec((v,), sch) for v in ("RAIL", "SHIP", "MAIL")])
    assert [it.label("partition") for it in out] == ["0", "1", "other"]


def test_partition_histogram_matches_oracle():
    rows, _, _ = lineitem_rows(10000, 2)
    sch = TABLES["lineitem"]
    qi = sch.index("quantity")
    out = run(RangePartition(key="quantity", boundaries=[10, 25, 40]), [rec(r, sch) for r in rows])
    oracle = Counter(str(sum(1 for b in (10, 25, 40) if r[qi] >= b)) for r in rows)
    assert Counter(it.label("partition") for it in out) == oracle


def test_partition_unknown_attr():
    with pytest.raises(OperatorFailure) as exc:
        run(HashPartition(key="zz"), [rec((1,), Schema.parse("k:int64"))])
    assert isinstance(exc.value.cause, UnknownAttribute)


# -- chunking and ordering --------------------------------------------------------

S96 = Schema.parse("s:string")  # 4-byte length + 96 bytes = 100 B per record


def test_chunk_greedy_packing():
    items = [rec(("x" * 96,), S96) for _ in range(10)]
    out = run(ChunkBySize(max_bytes=350), items)
    assert [len(b.payload) for b in out] == [3, 3, 3, 1]
    assert [b.label("chunk") for b in out] == ["0", "1", "2", "3"]


def test_chunk_oversized_record():
    out = run(ChunkBySize(max_bytes=10), [rec(("x" * 96,), S96)])
    assert len(out) == 1


@given(st.lists(st.text(max_size=30), max_size=40), st.integers(40, 200))
def test_chunk_conservation(values, cap):
    items = [rec((v,), S96) for v in values]
    out = run(ChunkBySize(max_bytes=cap), items)
    assert [r for b in out for r in b.payload] == [(v,) for v in values]
    for b in out:
        assert len(b.payload) == 1 or sum(L.record_size(r, S96) for r in b.payload) <= cap


def test_chunk_keeps_groups_apart():
    items = strat_items([5, 5])
    random.Random(0).shuffle(items)
    out = run(ChunkBySize(max_bytes=1 << 20), items)
    assert len(out) == 2 and {len(b.payload) for b in out} == {5}


def test_order():
    sch = Schema.parse("k:int64")
    asc = [rec((i,), sch) for i in range(5)]
    assert [it.payload for it in run(Order(key="k"), asc)] == [it.payload for it in asc]
    rev = list(reversed(asc))
    assert [it.payload[0] for it in run(Order(key="k"), rev)] == [0, 1, 2, 3, 4]
    rows = [(random.Random(i).randint(0, 100),) for i in range(10000)]
    got = [it.payload for it in run(Order(key="k"), [rec(r, sch) for r in rows])]
    assert got == sorted(rows)


# -- serialization -------------------------------------------------------------------

def test_serializer_roundtrip_and_empty():
    sch = Schema.parse("a:int64,b:string")
    blk = IngestItem(G.BLOCK, ((1, "x"), (2, "y")), (), sch)
    out = run(Serializer(layout="bin"), [blk])[0]
    assert out.granularity is G.SERIALIZED_BLOCK
    assert L.deserialize(out.payload, sch) == [(1, "x"), (2, "y")]
    empty = run(Serializer(layout="pax"), [IngestItem(G.BLOCK, (), (), sch)])[0]
    assert L.read_header(empty.payload).rows == 0


# -- constraints -------------------------------------------------------------------

FDS = Schema.parse("d:int64,s:string")


def test_fd_groups():
    ctx = Context()
    out = run(FdDetect(lhs="d", rhs="s"), [rec((1, v), FDS) for v in "OOO"], ctx)
    assert len(ctx.rejects) == 0 and {it.label("fd") for it in out} == {"0"}
    ctx = Context()
    out = run(FdDetect(lhs="d", rhs="s"), [rec((1, v), FDS) for v in "OOF"], ctx)
    assert len(ctx.rejects) == 1 and ctx.rejects[0].records == ((1, "F"),)
    assert sorted(it.label("fd") for it in out) == ["0", "0", "1"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.sampled_from("OFX")), max_size=40))
def test_fd_matches_pairwise_oracle(rows):
    ctx = Context()
    out = run(FdDetect(lhs="d", rhs="s"), [rec(r, FDS) for r in rows], ctx)
    flagged = Counter(it.payload for it in out if it.label("fd") == "1")
    oracle = fd_plurality_violations(rows, 0, 1)
    assert set(flagged) == oracle
    assert sum(flagged.values()) == sum(1 for r in rows if r in oracle)


@pytest.mark.parametrize("q,d,want", [(2, 0.10, "1"), (5, 0.10, "0"), (2, 0.09, "0")])
def test_dc_boundaries(q, d, want):
    assert run(DcDetect(), [rec((q, d), QD)])[0].label("dc") == want


def test_single_pass_repair():
    sch = Schema.parse("nation:string")
    ctx = Context()
    op = SinglePassRepair(attr="nation", dictionary={"mexico": "MX"}, valid=["MX", "US"])
    out = run(op, [rec((v,), sch) for v in ("MX", "mexico", "atlantis")], ctx)
    assert [it.payload for it in out] == [("MX",), ("MX",)]
    assert [it.label("repair") for it in out] == ["0", "1"]
    assert len(ctx.rejects) == 1 and ctx.rejects[0].records == (("atlantis",),)


# -- location and storage -------------------------------------------------------------

def blocks_with(labels_per_block):
    sch = Schema.parse("a:int64")
    out = []
    for i, labels in enumerate(labels_per_block):
        it = IngestItem(G.BLOCK, ((i,),), (), sch)
        for name, op in labels:
            it = op.emit(it, name)
        out.append(it)
    return out


def test_colocate():
    hp = HashPartition(name="p")
    out = run(CoLocator(), blocks_with([[("0", hp)], [("1", hp)], [("0", hp)]]))
    assert [it.label("locate") for it in out] == ["0", "1", "0"]
    with pytest.raises(OperatorFailure) as exc:
        run(CoLocator(), blocks_with([[]]))
    assert isinstance(exc.value.cause, MissingLabel)


def test_disjoint_replicas_get_distinct_ids():
    rep = ReplicateK(name="r")
    out = run(DisjointLocator(n_locations=3), blocks_with([[(str(i), rep)] for i in (1, 2, 3)]))
    assert sorted(int(it.label("locate")) for it in out) == [0, 1, 2]


def test_random_locator_replay():
    items = blocks_with([[] for _ in range(30)])
    a = [it.label("locate") for it in run(RandomLocator(n_locations=16, seed=4), items)]
    b = [it.label("locate") for it in run(RandomLocator(n_locations=16, seed=4), items)]
    assert a == b and all(0 <= int(x) < 16 for x in a)


def test_store_replication(tmp_path):
    cl = create_cluster(3, tmp_path / "c")
    ctx = Context(cluster=cl)
    sch = Schema.parse("a:int64")
    blk = ChunkBySize(name="chunk").emit(IngestItem(G.BLOCK, ((1,),), (), sch), 0)
    out = run(DfsStore(replication=2), [blk], ctx)
    assert len(out) == 1
    (entry,) = ctx.manifest
    assert len(cl.stat(entry["name"]).nodes) == 2
    assert L.deserialize(cl.get_block(entry["name"]), sch) == [(1,)]
