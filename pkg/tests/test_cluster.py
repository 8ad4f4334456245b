import pytest

from ingestplan.cluster import (AllReplicasFailed, IoFailure, create_cluster, digest, open_cluster)


def test_create_layouts(tmp_path):
    one = create_cluster(1, tmp_path / "one")
    assert one.nodes == ["node-0"]
    ten = create_cluster(10, tmp_path / "ten")
    assert len([p for p in (tmp_path / "ten").iterdir() if p.name.startswith("node-")]) == 10
    with pytest.raises(IoFailure):
        create_cluster(10, tmp_path / "ten")
    assert len(create_cluster(2, tmp_path / "ten", force=True).nodes) == 2


def test_put_replicas_distinct(tmp_path):
    cl = create_cluster(10, tmp_path / "c")
    sf = cl.put_block("a_b", b"data", 3)
    assert len(set(sf.nodes)) == 3 and not sf.degraded
    assert cl.put_block("loc", b"x", 1, 2).nodes[0] == "node-2"
    assert cl.put_block("loc13", b"x", 1, 13).nodes[0] == "node-3"


def test_put_degraded(tmp_path):
    cl = create_cluster(3, tmp_path / "c")
    sf = cl.put_block("f", b"x", 5)
    assert sf.degraded and len(sf.nodes) == 3


def test_map_location(tmp_path):
    cl = create_cluster(10, tmp_path / "c")
    assert cl.map_location(13) == "node-3"
    cl.set_location(7, "node-0")
    assert cl.map_location(7) == "node-0"
    cl.kill_node("node-3")
    assert cl.map_location(13) == "node-4"


def test_get_block_paths(cluster):
    cluster.put_block("f", b"payload", 3)
    assert digest(cluster.get_block("f")) == cluster.stat("f").digest
    cluster.corrupt_block("f", 0)
    assert cluster.get_block("f") == b"payload"
    primary = cluster.stat("f").nodes[0]
    assert cluster.replica_health("f")[primary] == "corrupt"
    for i in (1, 2):
        cluster.corrupt_block("f", i)
    with pytest.raises(AllReplicasFailed):
        cluster.get_block("f")


def test_list_blocks(cluster):
    assert cluster.list_blocks() == []
    for i in range(5):
        cluster.put_block(f"p{i}_{'pax' if i % 2 else 'srow'}", b"x", 1)
    assert len(cluster.list_blocks(lambda n: True)) == 5
    assert [sf.name for sf in cluster.list_blocks(lambda n: n.endswith("_pax"))] == ["p1_pax", "p3_pax"]


def test_kill_node(cluster):
    cluster.put_block("f", b"abc", 3)
    cluster.kill_node("node-1")
    assert cluster.get_block("f") == b"abc"
    cluster.kill_node("node-0")
    cluster.kill_node("node-2")
    with pytest.raises(AllReplicasFailed):
        cluster.get_block("f")


def test_set_replication(tmp_path):
    cl = create_cluster(10, tmp_path / "c")
    cl.put_block("f", b"abc", 2)
    assert len(set(cl.set_replication("f", 3).nodes)) == 3
    assert len(cl.set_replication("f", 1).nodes) == 1
    small = create_cluster(3, tmp_path / "s")
    small.put_block("g", b"abc", 1)
    sf = small.set_replication("g", 4)
    assert sf.degraded and len(sf.nodes) == 3


def test_journal_replay(tmp_path):
    cl = create_cluster(4, tmp_path / "c")
    cl.put_block("f", b"abc", 2)
    cl.set_location(9, "node-1")
    cl.kill_node("node-3")
    again = open_cluster(tmp_path / "c")
    assert again.stat("f").nodes == cl.stat("f").nodes
    assert again.map_location(9) == "node-1"
    assert again.dead == {"node-3"}
    assert again.get_block("f") == b"abc"
