"""Seeded synthetic tables (a lineitem-like fact table plus orders and customers).

Files are pipe-delimited text, one row per line, ``<table>-part-<i>.tbl``. Every
generated dataset has a JSON sidecar describing what was injected, so tests can
compare detection results to known answers.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Schema
from .oplib.layouts import format_value

TABLES: dict[str, Schema] = {
    "lineitem": Schema.parse(
        "orderkey:int64,partkey:int64,suppkey:int64,linenumber:int64,quantity:int64,"
        "extendedprice:float64,discount:float64,tax:float64,returnflag:string,linestatus:string,"
        "shipdate:date,commitdate:date,receiptdate:date,shipinstruct:string,shipmode:string,"
        "comment:string"),
    "orders": Schema.parse(
        "orderkey:int64,custkey:int64,orderstatus:string,totalprice:float64,orderdate:date,"
        "orderpriority:string,clerk:string,shippriority:int64,comment:string"),
    "customer": Schema.parse(
        "custkey:int64,name:string,address:string,country:string,phone:string,acctbal:float64,"
        "mktsegment:string,comment:string"),
}

SHIP_START = dt.date(1992, 1, 2)
SHIP_DAYS = 2400
STATUS_CUTOFF = dt.date(1995, 6, 17)
LINES_PER_ORDER = 4
# ten equal shipdate ranges; used by the range-partitioned scenarios
SHIPDATE_BOUNDARIES = tuple((SHIP_START + dt.timedelta(days=240 * i)).isoformat() for i in range(1, 10))

SHIPMODES = ("AIR", "FOB", "MAIL", "RAIL", "REG AIR", "SHIP", "TRUCK")
SHIPMODE_WEIGHTS = (0.10, 0.10, 0.15, 0.15, 0.10, 0.15, 0.25)
INSTRUCT = ("DELIVER IN PERSON", "COLLECT COD", "NONE", "TAKE BACK RETURN")
PRIORITIES = ("1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW")
SEGMENTS = ("AUTOMOBILE", "BUILDING", "FURNITURE", "HOUSEHOLD", "MACHINERY")
COUNTRIES = ("BR", "CN", "DE", "FR", "IN", "JP", "MX", "US")
DIRTY_COUNTRY = {"mexico": "MX", "Mexico": "MX", "usa": "US", "U.S.": "US", "germany": "DE",
                 "Deutschland": "DE", "france": "FR", "japan": "JP", "brasil": "BR"}
WORDS = ("final", "regular", "express", "pending", "ironic", "quick", "furious", "special",
         "bold", "silent", "careful", "blithe", "even", "unusual", "deposits", "packages",
         "accounts", "requests", "theodolites", "pinto", "beans", "foxes", "ideas", "asymptotes")


@dataclass
class GeneratedData:
    table: str
    rows: int
    seed: int
    files: list = field(default_factory=list)
    dc_violations: list = field(default_factory=list)  # [orderkey, linenumber]
    fd_violations: list = field(default_factory=list)
    dirty_values: int = 0
    sidecar: Optional[str] = None

    def dump(self, path: Path):
        self.sidecar = str(path)
        path.write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def load(cls, path) -> "GeneratedData":
        return cls(**json.loads(Path(path).read_text()))


def _comments(rng, n: int) -> list[str]:
    lens = rng.integers(2, 6, size=n)
    idx = rng.integers(0, len(WORDS), size=int(lens.sum()))
    out, pos = [], 0
    for k in lens:
        out.append(" ".join(WORDS[j] for j in idx[pos:pos + k]))
        pos += k
    return out


def lineitem_rows(n: int, seed: int = 0, inject_dc: int = 0, inject_fd: int = 0):
    """Rows plus the (orderkey, linenumber) ids of injected dc and fd violations.

    By construction the clean data has no violations: linestatus is a function of
    shipdate, and rows with quantity < 3 never carry a discount above 0.09.
    """
    rng = np.random.default_rng(seed)
    i = np.arange(n)
    orderkey = i // LINES_PER_ORDER + 1
    linenumber = i % LINES_PER_ORDER + 1
    partkey = rng.integers(1, 20001, size=n)
    suppkey = rng.integers(1, 1001, size=n)
    quantity = rng.integers(1, 51, size=n)
    discount_k = rng.integers(0, 11, size=n)
    discount_k = np.where(quantity < 3, np.minimum(discount_k, 9), discount_k)
    tax_k = rng.integers(0, 9, size=n)
    ship = rng.integers(0, SHIP_DAYS, size=n)
    commit = ship + rng.integers(-30, 31, size=n)
    receipt = ship + rng.integers(1, 31, size=n)
    flags = rng.choice(np.array(["A", "N", "R"]), size=n)
    modes = rng.choice(len(SHIPMODES), size=n, p=SHIPMODE_WEIGHTS)
    instr = rng.integers(0, len(INSTRUCT), size=n)
    comments = _comments(rng, n)

    dc_ids = rng.choice(n, size=min(inject_dc, n), replace=False) if inject_dc else np.array([], int)
    for r in dc_ids:
        quantity[r] = rng.integers(1, 3)
        discount_k[r] = 10

    fd_ids = []
    if inject_fd:
        # one flipped row per shipdate group, only in groups big enough for a clear plurality
        by_day: dict[int, list[int]] = {}
        for r, d in enumerate(ship.tolist()):
            by_day.setdefault(d, []).append(r)
        days = sorted(d for d, rs in by_day.items() if len(rs) >= 3)
        for d in rng.permutation(days)[:inject_fd]:
            rs = by_day[int(d)]
            fd_ids.append(rs[int(rng.integers(0, len(rs)))])

    base = SHIP_START.toordinal()
    rows = []
    flip = set(fd_ids)
    for r in range(n):
        sd = dt.date.fromordinal(base + int(ship[r]))
        status = "F" if sd <= STATUS_CUTOFF else "O"
        if r in flip:
            status = "O" if status == "F" else "F"
        q = int(quantity[r])
        price = round(q * (900 + (int(partkey[r]) % 1000) + 0.01 * (int(partkey[r]) % 100)), 2)
        rows.append((int(orderkey[r]), int(partkey[r]), int(suppkey[r]), int(linenumber[r]), q, price,
                     int(discount_k[r]) / 100, int(tax_k[r]) / 100, str(flags[r]), status, sd,
                     dt.date.fromordinal(base + int(commit[r])), dt.date.fromordinal(base + int(receipt[r])),
                     INSTRUCT[instr[r]], SHIPMODES[modes[r]], comments[r]))
    key = lambda r: [rows[r][0], rows[r][3]]
    return rows, sorted(key(int(r)) for r in dc_ids), sorted(key(r) for r in fd_ids)


def orders_rows(n: int, seed: int = 0):
    rng = np.random.default_rng(seed + 1)
    base = SHIP_START.toordinal() - 10
    custkey = rng.integers(1, max(2, n // 10) + 1, size=n)
    day = rng.integers(0, SHIP_DAYS, size=n)
    prio = rng.integers(0, len(PRIORITIES), size=n)
    status = rng.choice(np.array(["F", "O", "P"]), size=n)
    price = rng.integers(100000, 50000000, size=n)
    comments = _comments(rng, n)
    return [(k + 1, int(custkey[k]), str(status[k]), int(price[k]) / 100, dt.date.fromordinal(base + int(day[k])),
             PRIORITIES[prio[k]], f"Clerk#{int(custkey[k]) % 1000:09d}", 0, comments[k]) for k in range(n)]


def customer_rows(n: int, seed: int = 0, dirty: float = 0.0):
    rng = np.random.default_rng(seed + 2)
    country = rng.integers(0, len(COUNTRIES), size=n)
    is_dirty = rng.random(n) < dirty
    variants = {c: [d for d, v in DIRTY_COUNTRY.items() if v == c] for c in COUNTRIES}
    bal = rng.integers(-99999, 999999, size=n)
    seg = rng.integers(0, len(SEGMENTS), size=n)
    comments = _comments(rng, n)
    rows, n_dirty = [], 0
    for k in range(n):
        c = COUNTRIES[country[k]]
        if is_dirty[k] and variants[c]:
            c = variants[c][int(rng.integers(0, len(variants[c])))]
            n_dirty += 1
        rows.append((k + 1, f"Customer#{k + 1:09d}", f"addr {int(bal[k]) % 977}", c,
                     f"{10 + country[k]}-{int(bal[k]) % 1000:03d}-{k % 10000:04d}", int(bal[k]) / 100,
                     SEGMENTS[seg[k]], comments[k]))
    return rows, n_dirty


def format_rows(rows: Sequence[tuple], schema: Schema) -> str:
    types = schema.types
    return "".join("|".join(format_value(v, t) for v, t in zip(r, types)) + "\n" for r in rows)


def parse_rows(text: str, schema: Schema) -> list[tuple]:
    from .oplib.layouts import parse_value
    types = schema.types
    return [tuple(parse_value(f, t) for f, t in zip(line.split("|"), types))
            for line in text.splitlines() if line]


def gen_data(out_dir, table: str = "lineitem", rows: int = 10_000, files: int = 4, seed: int = 0,
             inject_dc: int = 0, inject_fd: int = 0, dirty: float = 0.0) -> GeneratedData:
    """Write ``files`` contiguous slices of the table plus ``<table>.meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if table not in TABLES:
        raise KeyError(f"unknown table {table!r}; known: {sorted(TABLES)}")
    meta = GeneratedData(table, rows, seed)
    if table == "lineitem":
        data, meta.dc_violations, meta.fd_violations = lineitem_rows(rows, seed, inject_dc, inject_fd)
    elif table == "orders":
        data = orders_rows(rows, seed)
    else:
        data, meta.dirty_values = customer_rows(rows, seed, dirty)
    files = max(1, files)
    for f in range(files):
        part = data[rows * f // files: rows * (f + 1) // files]
        p = out / f"{table}-part-{f}.tbl"
        p.write_text(format_rows(part, TABLES[table]), encoding="utf-8")
        meta.files.append(str(p))
    meta.dump(out / f"{table}.meta.json")
    return meta
