import json
from pathlib import Path

from ingestplan.datagen import TABLES, gen_data, lineitem_rows, parse_rows

LI = TABLES["lineitem"]
Q, D, OK, LN = (LI.index(a) for a in ("quantity", "discount", "orderkey", "linenumber"))


def test_lineitem_schema():
    assert len(LI.attributes) == 16
    for a in ("quantity", "discount", "shipdate", "linestatus", "orderkey", "partkey", "suppkey"):
        assert a in LI.names


def test_zero_rows(tmp_path):
    meta = gen_data(tmp_path, "lineitem", 0, 1, 0)
    assert Path(meta.files[0]).read_text() == ""
    side = json.loads(Path(meta.sidecar).read_text())
    assert side["dc_violations"] == [] and side["fd_violations"] == []


def test_dc_injection_matches_sidecar(tmp_path):
    meta = gen_data(tmp_path, "lineitem", 100_000, 2, 4, inject_dc=1000)
    assert len(meta.dc_violations) == 1000
    rows = [r for p in meta.files for r in parse_rows(Path(p).read_text(), LI)]
    scanned = {(r[OK], r[LN]) for r in rows if r[Q] < 3 and r[D] > 0.09}
    assert scanned == {tuple(x) for x in meta.dc_violations}


def test_same_seed_byte_identical(tmp_path):
    a = gen_data(tmp_path / "a", "lineitem", 2000, 3, 9, inject_fd=10)
    b = gen_data(tmp_path / "b", "lineitem", 2000, 3, 9, inject_fd=10)
    for x, y in zip(a.files, b.files):
        assert Path(x).read_bytes() == Path(y).read_bytes()
    assert a.fd_violations == b.fd_violations


def test_files_are_contiguous_slices(tmp_path):
    meta = gen_data(tmp_path, "lineitem", 1001, 4, 2)
    rows, _, _ = lineitem_rows(1001, 2)
    got = [r for p in meta.files for r in parse_rows(Path(p).read_text(), LI)]
    assert got == [tuple(r) for r in rows]


def test_other_tables(tmp_path):
    o = gen_data(tmp_path / "o", "orders", 100, 1, 0)
    assert len(parse_rows(Path(o.files[0]).read_text(), TABLES["orders"])) == 100
    c = gen_data(tmp_path / "c", "customer", 500, 1, 0, dirty=0.2)
    assert 0 < c.dirty_values < 500
