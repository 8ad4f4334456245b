import itertools
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ingestplan.erasure import (FieldBound, InconsistentStripe, TooFewBlocks, generator, gf_inv, gf_mul,
                                rs_decode, rs_encode)


def test_field_inverse():
    for a in range(1, 256):
        assert gf_mul(a, gf_inv(a)) == 1


def test_generator_is_systematic():
    g = generator(10, 3)
    assert (g[:10] == np.eye(10, dtype=np.uint8)).all()


def test_k1_parity_equals_data():
    assert rs_encode([b"hello"], 1) == [b"hello"]


def test_zero_data_zero_parity():
    assert rs_encode([bytes(64)] * 5, 3) == [bytes(64)] * 3


def test_no_erasures_nothing_to_do():
    data = [os.urandom(32) for _ in range(4)]
    members = dict(enumerate(data + rs_encode(data, 2)))
    assert rs_decode(members, 4, 2) == {}


@pytest.mark.parametrize("k,m", [(5, 3), (10, 3)])
def test_exhaustive_erasures(k, m):
    rng = np.random.default_rng(k)
    data = [rng.integers(0, 256, 256, dtype=np.uint8).tobytes() for _ in range(k)]
    full = data + rs_encode(data, m)
    for r in range(1, m + 1):
        for lost in itertools.combinations(range(k + m), r):
            avail = {i: b for i, b in enumerate(full) if i not in lost}
            got = rs_decode(avail, k, m)
            assert got == {i: full[i] for i in lost}


def test_too_few_blocks():
    data = [bytes([i]) * 8 for i in range(10)]
    full = data + rs_encode(data, 3)
    with pytest.raises(TooFewBlocks):
        rs_decode({i: b for i, b in enumerate(full) if i >= 4}, 10, 3)


def test_errors():
    with pytest.raises(FieldBound):
        generator(250, 10)
    with pytest.raises(InconsistentStripe):
        rs_encode([b"ab", b"abc"], 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 40), st.data())
def test_random_stripes(k, m, width, data):
    blocks = [data.draw(st.binary(min_size=width, max_size=width)) for _ in range(k)]
    full = blocks + rs_encode(blocks, m)
    lost = data.draw(st.sets(st.integers(0, k + m - 1), max_size=m))
    avail = {i: b for i, b in enumerate(full) if i not in lost}
    assert rs_decode(avail, k, m) == {i: full[i] for i in lost}
