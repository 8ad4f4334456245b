import pytest
from hypothesis import given, strategies as st

from ingestplan.core import (SKIPPED, Context, DuplicateLabel, DummyPassThrough, Granularity as G,
                             IngestItem, Schema, attach_label, drain_operator, get_label, validate_chain)
from ingestplan.oplib.operators import (ChunkBySize, CsvParse, HashPartition, Reservoir, Serializer,
                                        SinglePassRepair)


def rec(row, schema=Schema.parse("a:int64")):
    return IngestItem(G.RECORD, tuple(row), (), schema)


def test_attach_label_appends():
    it = attach_label(rec((1,)), "replicate1", 2)
    assert [(l.op_name, l.value) for l in it.labels] == [("replicate1", "2")]
    it = attach_label(attach_label(rec((1,)), "parse", 7), "hash", 3)
    assert [(l.op_name, l.value) for l in it.labels] == [("parse", "7"), ("hash", "3")]
    with pytest.raises(DuplicateLabel):
        attach_label(attach_label(rec((1,)), "parse", 7), "parse", 9)


def test_items_are_immutable():
    it = rec((1,))
    with pytest.raises(AttributeError):
        it.payload = (2,)


def test_get_label():
    assert get_label(attach_label(rec((1,)), "replicate1", 1), "replicate1") == "1"
    assert get_label(rec((1,)), "x") is None


def test_dummy_labels_minus_one():
    op = DummyPassThrough(HashPartition(name="hash1", key="a"))
    op.initialize(Context())
    out = drain_operator(op, [rec((i,)) for i in range(3)])
    assert [get_label(it, "hash1") for it in out] == [SKIPPED] * 3
    assert [it.payload for it in out] == [(0,), (1,), (2,)]


def test_single_pass_repair_through_drain():
    sch = Schema.parse("nation:string")
    op = SinglePassRepair(attr="nation", dictionary={"mexico": "MX"})
    op.initialize(Context())
    (out,) = drain_operator(op, [rec(("mexico",), sch)])
    assert out.payload == ("MX",)


def test_reservoir_emits_only_at_finalize():
    op = Reservoir(capacity=2, seed=1)
    op.initialize(Context())
    op.set_input([rec((i,)) for i in range(5)])
    streamed = []
    while op.has_next():
        streamed.append(op.next())
    assert streamed == []
    assert len(op.finalize()) == 2


def test_drain_rejects_wrong_granularity():
    from ingestplan.core import GranularityMismatch

    with pytest.raises(GranularityMismatch):
        drain_operator(Serializer(layout="pax"), [rec((1,))])


@given(st.lists(st.integers(0, 100), max_size=30), st.integers(0, 2**16))
def test_drain_deterministic(values, seed):
    def once():
        op = Reservoir(capacity=4, seed=seed)
        op.initialize(Context())
        return drain_operator(op, [rec((v,)) for v in values])
    assert once() == once()


def test_validate_chain():
    assert validate_chain([CsvParse(schema="a:int64"), HashPartition(key="a")]) == []
    bad = validate_chain([CsvParse(schema="a:int64"), Serializer(layout="pax")])
    assert len(bad) == 1 and "pair (1,2)" in bad[0]
    assert validate_chain([CsvParse(table="lineitem"), ChunkBySize(max_bytes=100), Serializer()]) == []
    with pytest.raises(ValueError):
        validate_chain([])


def test_schema_parse_and_project():
    s = Schema.parse("a:int64,b:string,c:date")
    assert s.names == ("a", "b", "c")
    assert s.project(["c", "a"]).names == ("c", "a")
    with pytest.raises(ValueError):
        Schema.parse("a:int64,a:string")
    with pytest.raises(ValueError):
        Schema.parse("a:bogus")
