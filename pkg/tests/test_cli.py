import json
import subprocess
import sys

import pytest

from ingestplan.cli import main
from ingestplan.lang import PROGRAM_DIR


def run(capsys, *argv):
    code = main(list(argv))
    out = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]
    return code, out


@pytest.fixture
def ingested(tmp_path, capsys):
    root = str(tmp_path / "c")
    data = str(tmp_path / "d")
    assert run(capsys, "--root", root, "cluster", "create", "--nodes", "3")[0] == 0
    code, out = run(capsys, "gen", "--out", data, "--rows", "2000", "--files", "2", "--dc-rate", "0.01")
    assert code == 0 and out[0]["dc_violations"] == 20
    prog = str(PROGRAM_DIR / "hybrid_replicas.ingest")
    code, out = run(capsys, "--root", root, "ingest", prog, "--input", data, "--plan-id", "hy", "--explain")
    assert code == 0
    assert out[0]["event"] == "explain" and "before" in out[0]
    assert any(e["event"] == "ingested" for e in out)
    return root, data


def test_select_and_agg(ingested, capsys):
    root, _ = ingested
    code, out = run(capsys, "--root", root, "query", "select", "--plan", "hy", "--where", "quantity<3 and discount>0.09",
                    "--limit", "0")
    assert code == 0 and out[-1]["rows"] == 20
    code, out = run(capsys, "--root", root, "query", "agg", "--plan", "hy")
    assert code == 1 and out[0]["error"] == "NotPartitionedOnKey"


def test_agg_and_join_on_placed_tables(tmp_path, capsys):
    root = str(tmp_path / "c")
    run(capsys, "--root", root, "cluster", "create", "--nodes", "4")
    for table, rows in (("orders", 500), ("lineitem", 2000)):
        data = str(tmp_path / table)
        run(capsys, "gen", "--table", table, "--out", data, "--rows", str(rows), "--files", "2")
        code, _ = run(capsys, "--root", root, "ingest", str(PROGRAM_DIR / f"placement_{table}.ingest"),
                      "--input", data, "--plan-id", table, "--prefix", table[0])
        assert code == 0
    code, out = run(capsys, "--root", root, "query", "agg", "--plan", "lineitem")
    assert code == 0 and sum(o["count"] for o in out[:-1]) == 2000
    code, out = run(capsys, "--root", root, "query", "join", "--plan", "lineitem", "--right", "orders")
    assert code == 0 and out[0]["rows"] == 2000
    code, out = run(capsys, "--root", root, "query", "show-splits", "--plan", "orders")
    assert code == 0 and sum(o["files"] for o in out) > 0


def test_layout_filter_is_partial(ingested, capsys):
    # hybrid blocks live in exactly one layout each
    root, _ = ingested
    counts = [run(capsys, "--root", root, "query", "select", "--plan", "hy", "--layout", lay, "--limit", "0")[1][-1]["rows"]
              for lay in ("sortedRow", "rcFile", "pax")]
    assert sum(counts) == 2000 and all(c > 0 for c in counts)


def test_plan_and_status(ingested, capsys):
    root, _ = ingested
    assert run(capsys, "--root", root, "plan", "list")[1] == [{"plan": "hy"}]
    code, out = run(capsys, "--root", root, "plan", "show", "hy")
    assert code == 0 and out[0]["plan"] == "hy" and out[0]["stages"]
    code, out = run(capsys, "--root", root, "cluster", "status")
    assert out[0]["unhealthy"] == 0 and out[0]["plans"] == ["hy"]


def test_corrupt_then_recover(ingested, capsys):
    root, _ = ingested
    from ingestplan.cluster import open_cluster

    victim = open_cluster(root).list_blocks()[0].name
    assert run(capsys, "--root", root, "cluster", "corrupt", victim)[0] == 0
    _, out = run(capsys, "--root", root, "cluster", "status")
    assert out[0]["unhealthy"] == 1
    code, out = run(capsys, "--root", root, "recover", "--once")
    assert code == 0 and out and all(e["event"] == "recovered" for e in out)
    _, out = run(capsys, "--root", root, "cluster", "status")
    assert out[0]["unhealthy"] == 0


def test_missing_targets(tmp_path, capsys):
    root = str(tmp_path / "c")
    run(capsys, "--root", root, "cluster", "create")
    assert run(capsys, "--root", root, "cluster", "kill-node")[0] == 2
    assert run(capsys, "--root", root, "plan", "show")[0] == 2
    code, out = run(capsys, "--root", root, "plan", "show", "nope")
    assert code == 1 and out[0]["error"]
    assert run(capsys, "--root", root, "recover", "--once")[0] == 1


def test_scenario_commands(tmp_path, capsys):
    code, out = run(capsys, "scenario", "list")
    assert code == 0 and len(out) == 15
    code, out = run(capsys, "scenario", "run", "fd-check", "--rows", "1000", "--workdir", str(tmp_path))
    assert code == 0 and out[0]["ok"]


def test_module_entrypoint(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ingestplan", "scenario", "list"], capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.splitlines()) == 15
