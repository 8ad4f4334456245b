"""Bytes read by a projection of 1..15 lineitem attributes, per layout.

Ingests the per-replica-layouts program (each block stored once per layout) and
scans the same projection against each layout's replica.

    python3 scripts/projection_sweep.py --rows 20000
"""

import argparse
import tempfile
from pathlib import Path

from ingestplan import access
from ingestplan.cluster import create_cluster
from ingestplan.datagen import TABLES, gen_data
from ingestplan.lang import PROGRAM_DIR, compile_text, default_registry
from ingestplan.oplib.layouts import IoStats
from ingestplan.runtime import RuntimeConfig, execute_plan
from ingestplan.scenarios import source_files

LAYOUTS = ("sortedRow", "rcFile", "pax")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(tempfile.mkdtemp(prefix="projsweep-"))
    cl = create_cluster(3, work / "cluster")
    meta = gen_data(work / "data", "lineitem", args.rows, 4, args.seed)
    plan = compile_text((PROGRAM_DIR / "per_replica_layouts.ingest").read_text(), default_registry(), plan_id="sweep")
    execute_plan(plan, source_files(meta, cl), cl, RuntimeConfig(seed=args.seed))
    ds = access.Dataset(cl, plan)
    names = TABLES["lineitem"].names
    print("attrs  " + "  ".join(f"{lay:>12}" for lay in LAYOUTS) + "   pax/row")
    for n in range(1, 16):
        out = []
        for lay in LAYOUTS:
            st = IoStats()
            access.scan_select_project(ds.filter_replica_by_layout(lay), names[:n], None, st)
            out.append(st.bytes_read)
        print(f"{n:5d}  " + "  ".join(f"{b:12d}" for b in out) + f"   {out[2] / out[0]:.3f}")


if __name__ == "__main__":
    main()
