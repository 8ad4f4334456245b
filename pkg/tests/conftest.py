import time
from contextlib import contextmanager

import pytest

from ingestplan.cluster import create_cluster
from ingestplan.datagen import gen_data
from ingestplan.lang import default_registry


@contextmanager
def time_limit(seconds: float):
    """Fail the enclosing test if the block runs longer than ``seconds``."""
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.1f}s, limit {seconds}s"


@pytest.fixture
def cluster(tmp_path):
    return create_cluster(3, tmp_path / "cluster")


@pytest.fixture
def small_data(tmp_path):
    return gen_data(tmp_path / "data", "lineitem", 2000, 4, 0)


@pytest.fixture
def small_blocks_registry():
    # 64 KiB chunks so a few thousand rows span several blocks
    return default_registry().override(**{"100mbBlocks": {"max_bytes": 65536}})
