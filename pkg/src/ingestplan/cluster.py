"""Simulated multi-node block store backed by a directory tree and a metadata journal.

Layout::

    <root>/slaves             node ids, one per line (round-robin order)
    <root>/meta.journal       append-only mutation log, replayed on open
    <root>/node-<i>/blocks/   replica files
    <root>/node-<i>/DEAD      present once the node was killed
    <root>/dfs/               shared area (shuffles, catalogs, persisted plans)
"""

from __future__ import annotations

import hashlib
import os
import shutil
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from .core import IngestError

JOURNAL = "meta.journal"


class ClusterError(IngestError):
    pass


class IoFailure(ClusterError):
    pass


class UnknownNode(ClusterError):
    pass


class UnknownReplica(ClusterError):
    pass


class UnknownFile(ClusterError):
    pass


class AllReplicasFailed(ClusterError):
    pass


class NotEnoughNodes(ClusterError):
    pass


class ClusterUnavailable(ClusterError):
    pass


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


@dataclass
class StoredFile:
    name: str
    size: int
    digest: str
    nodes: tuple
    health: dict = field(default_factory=dict)  # node -> ok | missing | corrupt
    degraded: bool = False

    @property
    def healthy_nodes(self) -> list[str]:
        return [n for n in self.nodes if self.health.get(n, "ok") == "ok"]


class Cluster:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        if not (self.root / "slaves").exists():
            raise ClusterUnavailable(f"no cluster at {self.root}")
        self.nodes = [l.strip() for l in (self.root / "slaves").read_text().splitlines() if l.strip()]
        self.default_replication = 3
        self.files: dict[str, StoredFile] = {}
        self.dead: set[str] = set()
        self.location_map: dict[int, str] = {}
        self._rr = 0
        self._meta_lock = threading.RLock()
        self._journal_lock = threading.Lock()
        self._file_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._replay()

    # -- journal ------------------------------------------------------------
    @property
    def journal_path(self) -> Path:
        return self.root / JOURNAL

    def _append(self, *fields):
        line = "|".join(str(f) for f in fields) + "\n"
        with self._journal_lock:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()

    def _replay(self):
        self.files.clear()
        self.dead.clear()
        self.location_map.clear()
        if not self.journal_path.exists():
            return
        for line in self.journal_path.read_text(encoding="utf-8").splitlines():
            if line:
                self.apply_record(line.split("|"))

    def apply_record(self, rec: list[str]):
        """Apply one journal record to the in-memory state."""
        op = rec[0]
        if op == "CREATE":
            self.default_replication = int(rec[2])
        elif op == "PUT":
            name, size, dg, nodes = rec[1], int(rec[2]), rec[3], tuple(n for n in rec[4].split(",") if n)
            self.files[name] = StoredFile(name, size, dg, nodes, {n: "ok" for n in nodes})
        elif op == "ADD":
            sf = self.files[rec[1]]
            if rec[2] not in sf.nodes:
                sf.nodes = sf.nodes + (rec[2],)
            sf.health[rec[2]] = "ok"
        elif op == "DROP":
            sf = self.files[rec[1]]
            sf.nodes = tuple(n for n in sf.nodes if n != rec[2])
            sf.health.pop(rec[2], None)
        elif op == "FLAG":
            self.files[rec[1]].health[rec[2]] = rec[3]
        elif op == "DELETE":
            self.files.pop(rec[1], None)
        elif op == "KILL":
            self.dead.add(rec[1])
            for sf in self.files.values():
                if rec[1] in sf.nodes:
                    sf.health[rec[1]] = "missing"
        elif op == "MAP":
            self.location_map[int(rec[1])] = rec[2]

    def state_digest(self) -> tuple:
        """Comparable snapshot of the metadata (for replay checks)."""
        files = tuple(sorted((n, f.size, f.digest, f.nodes, tuple(sorted(f.health.items())))
                             for n, f in self.files.items()))
        return files, tuple(sorted(self.dead)), tuple(sorted(self.location_map.items()))

    # -- topology -------------------------------------------------------------
    @property
    def alive(self) -> list[str]:
        return [n for n in self.nodes if n not in self.dead]

    def node_dir(self, node: str) -> Path:
        if node not in self.nodes:
            raise UnknownNode(node)
        return self.root / node

    def block_path(self, node: str, name: str) -> Path:
        return self.node_dir(node) / "blocks" / name

    @property
    def dfs(self) -> Path:
        return self.root / "dfs"

    def map_location(self, location_id: int) -> str:
        """Location id to node: explicit map first, else round-robin over the slaves order,
        moving to the next alive node when the mapped one is dead."""
        alive = self.alive
        if not alive:
            raise ClusterUnavailable("no alive nodes")
        node = self.location_map.get(location_id)
        if node is None:
            node = self.nodes[location_id % len(self.nodes)]
        start = self.nodes.index(node)
        for k in range(len(self.nodes)):
            cand = self.nodes[(start + k) % len(self.nodes)]
            if cand not in self.dead:
                return cand
        raise ClusterUnavailable("no alive nodes")

    def set_location(self, location_id: int, node: str):
        self.node_dir(node)
        with self._meta_lock:
            self.location_map[location_id] = node
            self._append("MAP", location_id, node)

    def _successors(self, first: str, count: int, exclude: Iterable[str] = ()) -> list[str]:
        skip = set(exclude) | self.dead
        start = self.nodes.index(first)
        out = []
        for k in range(len(self.nodes)):
            cand = self.nodes[(start + k) % len(self.nodes)]
            if cand not in skip and cand not in out:
                out.append(cand)
                if len(out) == count:
                    break
        return out

    # -- data path ---------------------------------------------------------------
    def _write_replica(self, node: str, name: str, data: bytes):
        path = self.block_path(node, name)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def put_block(self, name: str, data: bytes, replication: int = None,
                  location_id: Optional[int] = None) -> StoredFile:
        from .access import validate_name

        validate_name(name)
        replication = self.default_replication if replication is None else int(replication)
        if replication < 1:
            raise ValueError("replication must be >= 1")
        alive = self.alive
        if not alive:
            raise ClusterUnavailable("no alive nodes")
        with self._file_locks[name]:
            with self._meta_lock:
                if location_id is not None:
                    primary = self.map_location(int(location_id))
                else:
                    primary = alive[self._rr % len(alive)]
                    self._rr += 1
            targets = self._successors(primary, replication)
            for node in targets:
                self._write_replica(node, name, data)
            sf = StoredFile(name, len(data), digest(data), tuple(targets), {n: "ok" for n in targets},
                            degraded=len(targets) < replication)
            with self._meta_lock:
                self.files[name] = sf
                self._append("PUT", name, sf.size, sf.digest, ",".join(targets))
        return sf

    def stat(self, name: str) -> StoredFile:
        try:
            return self.files[name]
        except KeyError:
            raise UnknownFile(name) from None

    def _flag(self, name: str, node: str, state: str):
        sf = self.files[name]
        if sf.health.get(node) != state:
            sf.health[node] = state
            self._append("FLAG", name, node, state)

    def read_replica(self, name: str, node: str) -> Optional[bytes]:
        """Bytes of one replica when it is present and digest-clean, else None (and flagged)."""
        sf = self.stat(name)
        if node in self.dead:
            return None
        path = self.block_path(node, name)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            with self._meta_lock:
                self._flag(name, node, "missing")
            return None
        if digest(data) != sf.digest:
            with self._meta_lock:
                self._flag(name, node, "corrupt")
            return None
        return data

    def get_block(self, name: str) -> bytes:
        sf = self.stat(name)
        for node in sf.nodes:
            data = self.read_replica(name, node)
            if data is not None:
                return data
        raise AllReplicasFailed(f"no healthy replica of {name}")

    def replica_health(self, name: str) -> dict:
        sf = self.stat(name)
        out = {}
        for node in sf.nodes:
            if node in self.dead:
                out[node] = "missing"
            elif sf.health.get(node) == "corrupt":
                out[node] = "corrupt"
            else:
                out[node] = "ok" if self.read_replica(name, node) is not None else sf.health[node]
        return out

    def scan_health(self) -> dict[str, dict]:
        return {n: self.replica_health(n) for n in sorted(self.files)}

    def list_blocks(self, predicate: Callable[[str], bool] = None) -> list[StoredFile]:
        with self._meta_lock:
            names = sorted(self.files)
        return [self.files[n] for n in names if predicate is None or predicate(n)]

    def stored_bytes(self, predicate: Callable[[str], bool] = None) -> int:
        """Physical bytes over all replicas."""
        return sum(sf.size * len(sf.nodes) for sf in self.list_blocks(predicate))

    # -- failure injection -------------------------------------------------------
    def kill_node(self, node: str):
        self.node_dir(node)
        with self._meta_lock:
            if node in self.dead:
                return
            (self.node_dir(node) / "DEAD").write_text("killed\n")
            self._append("KILL", node)
            self.apply_record(["KILL", node])

    def corrupt_block(self, name: str, replica_index: int = 0):
        sf = self.stat(name)
        if not 0 <= replica_index < len(sf.nodes):
            raise UnknownReplica(f"{name} has {len(sf.nodes)} replicas")
        path = self.block_path(sf.nodes[replica_index], name)
        data = bytearray(path.read_bytes())
        if not data:
            data = bytearray(b"\x00")
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))

    # -- replication management ----------------------------------------------------
    def prune(self, name: str) -> StoredFile:
        """Forget replicas that are dead, missing or corrupt."""
        health = self.replica_health(name)
        with self._file_locks[name], self._meta_lock:
            sf = self.files[name]
            for node, state in health.items():
                if state != "ok":
                    sf.nodes = tuple(n for n in sf.nodes if n != node)
                    sf.health.pop(node, None)
                    self._append("DROP", name, node)
        return sf

    def set_replication(self, name: str, factor: int) -> StoredFile:
        if factor < 1:
            raise ValueError("factor must be >= 1")
        sf = self.prune(name)
        if not sf.nodes:
            raise AllReplicasFailed(f"no healthy replica of {name}")
        with self._file_locks[name]:
            if len(sf.nodes) < factor:
                data = self.get_block(name)
                new = self._successors(sf.nodes[0], factor - len(sf.nodes), exclude=sf.nodes)
                for node in new:
                    self._write_replica(node, name, data)
                    with self._meta_lock:
                        sf.nodes = sf.nodes + (node,)
                        sf.health[node] = "ok"
                        self._append("ADD", name, node)
            while len(sf.nodes) > factor:
                node = sf.nodes[-1]
                try:
                    self.block_path(node, name).unlink()
                except FileNotFoundError:
                    pass
                with self._meta_lock:
                    sf.nodes = sf.nodes[:-1]
                    sf.health.pop(node, None)
                    self._append("DROP", name, node)
            sf.degraded = len(sf.nodes) < factor
        return sf

    def restore_replica(self, name: str, data: bytes, avoid: Iterable[str] = ()) -> StoredFile:
        """Store rebuilt bytes for ``name`` on an alive node with no healthy copy."""
        sf = self.prune(name)
        if digest(data) != sf.digest:
            raise IoFailure(f"rebuilt bytes of {name} do not match the recorded digest")
        alive = self.alive
        if not alive:
            raise ClusterUnavailable("no alive nodes")
        skip = set(sf.nodes) | set(avoid)
        cands = [n for n in alive if n not in skip] or [n for n in alive if n not in sf.nodes]
        if not cands:
            raise NotEnoughNodes(f"no node left for {name}")
        node = cands[0]
        with self._file_locks[name]:
            self._write_replica(node, name, data)
            with self._meta_lock:
                sf.nodes = sf.nodes + (node,)
                sf.health[node] = "ok"
                self._append("ADD", name, node)
        return sf

    def delete(self, name: str):
        sf = self.stat(name)
        for node in sf.nodes:
            try:
                self.block_path(node, name).unlink()
            except (FileNotFoundError, UnknownNode):
                pass
        with self._meta_lock:
            self.files.pop(name, None)
            self._append("DELETE", name)

    def holder_of_primary(self, name: str) -> Optional[str]:
        healthy = [n for n in self.stat(name).nodes if n not in self.dead]
        return healthy[0] if healthy else None


def create_cluster(n_nodes: int, root: str | os.PathLike, default_replication: int = 3,
                   force: bool = False) -> Cluster:
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    root = Path(root)
    if (root / "slaves").exists():
        if not force:
            raise IoFailure(f"cluster already exists at {root} (use force)")
        for child in root.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    try:
        root.mkdir(parents=True, exist_ok=True)
        nodes = [f"node-{i}" for i in range(n_nodes)]
        for n in nodes:
            (root / n / "blocks").mkdir(parents=True, exist_ok=True)
            (root / n / "spill").mkdir(parents=True, exist_ok=True)
        (root / "dfs").mkdir(exist_ok=True)
        (root / "slaves").write_text("".join(f"{n}\n" for n in nodes))
        (root / JOURNAL).write_text(f"CREATE|{n_nodes}|{default_replication}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return Cluster(root)


def open_cluster(root: str | os.PathLike) -> Cluster:
    return Cluster(root)
