"""Systematic Reed-Solomon over GF(2^8), reducing polynomial x^8+x^4+x^3+x^2+1 (0x11D).

The generator is the (k+m) x k Vandermonde matrix ``V[i][j] = i**j`` (with
``0**0 = 1``) multiplied by the inverse of its top k x k block, so the first k
rows are the identity and any k rows are invertible.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .core import IngestError

POLY = 0x11D


class FieldBound(IngestError):
    pass


class TooFewBlocks(IngestError):
    pass


class InconsistentStripe(IngestError):
    pass


def _tables():
    exp = np.zeros(512, dtype=np.uint8)
    log = np.zeros(256, dtype=np.int32)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= POLY
    exp[255:510] = exp[:255]
    a = np.arange(256)
    mul = exp[(log[a][:, None] + log[a][None, :]) % 255].astype(np.uint8)
    mul[0, :] = 0
    mul[:, 0] = 0
    return exp, log, mul


EXP, LOG, MUL = _tables()


def gf_mul(a: int, b: int) -> int:
    return int(MUL[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(EXP[(255 - LOG[a]) % 255])


def gf_pow(a: int, n: int) -> int:
    if n == 0:
        return 1
    if a == 0:
        return 0
    return int(EXP[(int(LOG[a]) * n) % 255])


def gf_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.uint8)
    for i in range(a.shape[0]):
        for t in range(a.shape[1]):
            c = a[i, t]
            if c:
                out[i] ^= MUL[c][b[t]]
    return out


def gf_invert(m: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inverse over GF(256)."""
    n = m.shape[0]
    aug = np.concatenate([m.astype(np.uint8), np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r, col]), None)
        if pivot is None:
            raise np.linalg.LinAlgError("singular matrix over GF(256)")
        aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] = MUL[gf_inv(int(aug[col, col]))][aug[col]]
        for r in range(n):
            if r != col and aug[r, col]:
                aug[r] ^= MUL[aug[r, col]][aug[col]]
    return aug[:, n:]


@lru_cache(maxsize=64)
def generator(k: int, m: int) -> np.ndarray:
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    if k + m > 255:
        raise FieldBound(f"k+m={k + m} exceeds 255")
    v = np.array([[gf_pow(i, j) for j in range(k)] for i in range(k + m)], dtype=np.uint8)
    g = gf_matmul(v, gf_invert(v[:k]))
    g.setflags(write=False)
    return g


def _as_arrays(blocks: Sequence[bytes]) -> np.ndarray:
    lengths = {len(b) for b in blocks}
    if len(lengths) > 1:
        raise InconsistentStripe(f"block lengths differ: {sorted(lengths)}")
    return np.frombuffer(b"".join(blocks), dtype=np.uint8).reshape(len(blocks), -1)


def rs_encode(data: Sequence[bytes], m: int) -> list[bytes]:
    k = len(data)
    g = generator(k, m)
    arr = _as_arrays(data)
    return [gf_matmul(g[k + r:k + r + 1], arr)[0].tobytes() for r in range(m)]


def rs_decode(available: Mapping[int, bytes], k: int, m: int) -> dict[int, bytes]:
    """Rebuild every missing member (indices 0..k+m-1; data first) from >= k survivors."""
    n = k + m
    for i in available:
        if not 0 <= i < n:
            raise InconsistentStripe(f"member index {i} outside 0..{n - 1}")
    missing = [i for i in range(n) if i not in available]
    if not missing:
        return {}
    if len(available) < k:
        raise TooFewBlocks(f"{len(available)} survivors, need {k}")
    g = generator(k, m)
    rows = sorted(available)[:k]
    arr = _as_arrays([available[i] for i in rows])
    data = gf_matmul(gf_invert(g[rows]), arr)
    out = {}
    for i in missing:
        out[i] = data[i].tobytes() if i < k else gf_matmul(g[i:i + 1], data)[0].tobytes()
    return out
