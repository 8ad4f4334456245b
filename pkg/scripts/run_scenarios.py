"""Run every named scenario and print a one-line summary each.

    python3 scripts/run_scenarios.py --rows 10000 [--only erasure,dc-check]
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

from ingestplan.scenarios import SCENARIOS, run_scenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=10_000)
    ap.add_argument("--nodes", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", help="comma-separated scenario ids")
    args = ap.parse_args()
    ids = args.only.split(",") if args.only else list(SCENARIOS)
    work = Path(tempfile.mkdtemp(prefix="scenarios-"))
    failed = []
    for sid in ids:
        t0 = time.perf_counter()
        res = run_scenario(sid, work / sid, rows=args.rows, nodes=args.nodes, seed=args.seed)
        stored = sum(r.stored_bytes for r in res.reports)
        status = "ok" if res.ok else "FAIL"
        print(f"{sid:28s} {status:4s} {time.perf_counter() - t0:6.2f}s stored={stored:>11d}  {res.checks}")
        if not res.ok:
            failed.append(sid)
    if failed:
        print("failed:", ", ".join(failed))
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
