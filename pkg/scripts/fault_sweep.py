"""Inject n failures into each operator of a program in turn and compare with a clean run.

With n below the retry limit the manifest must match the clean run. At n=3 the
operator is replaced by the pass-through, so its outputs differ; operators
that change granularity cannot be passed through and abort the run.

    python3 scripts/fault_sweep.py --program log_analytics --failures 1
"""

import argparse
import tempfile
from pathlib import Path

from ingestplan.cluster import create_cluster
from ingestplan.core import IngestError
from ingestplan.datagen import gen_data
from ingestplan.lang import compile_text, default_registry, load_program
from ingestplan.optimizer import optimize_plan
from ingestplan.runtime import RuntimeConfig, execute_plan
from ingestplan.scenarios import source_files


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--program", default="log_analytics")
    ap.add_argument("--rows", type=int, default=4000)
    ap.add_argument("--failures", type=int, default=1)
    args = ap.parse_args()
    work = Path(tempfile.mkdtemp(prefix="faults-"))
    meta = gen_data(work / "data", "lineitem", args.rows, 4, 0)
    reg = default_registry().override(**{"100mbBlocks": {"max_bytes": 65536}})
    plan, _ = optimize_plan(compile_text(load_program(args.program), reg))

    def run(tag, inject):
        c = create_cluster(3, work / tag)
        return execute_plan(plan, source_files(meta, c), c, RuntimeConfig(inject_failures=inject))

    base = run("base", {}).normalized_manifest()
    for op in plan.ops():
        try:
            rep = run(op.name, {op.name: args.failures})
        except IngestError as exc:
            print(f"{op.name:14s} failed: {type(exc).__name__}")
            continue
        same = rep.normalized_manifest() == base
        print(f"{op.name:14s} retries={len(rep.events_of('retry')):2d} dummy={len(rep.events_of('dummy')):2d} "
              f"manifest={'same' if same else 'DIFFERENT'}")


if __name__ == "__main__":
    main()
