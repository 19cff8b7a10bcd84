"""Systematic Reed-Solomon erasure coding over GF(2^8).

Parity rows come from a Cauchy matrix, so the generator ``[I; C]`` is MDS:
any ``k`` of the ``n = k + m`` fragments rebuild the ``k`` data fragments.
Arithmetic is vectorized through a full 256 x 256 multiplication table.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

PRIM_POLY = 0x11D
MAX_GROUP = 255

DATA = "data"
PARITY = "parity"


class ErasureError(ValueError):
    pass


class UnrecoverableError(ErasureError):
    """Fewer than ``k`` distinct fragments survived."""


def _build_tables():
    exp = np.zeros(512, dtype=np.uint8)
    log = np.zeros(256, dtype=np.int32)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIM_POLY
    exp[255:510] = exp[:255]
    a = np.arange(256)
    mul = exp[(log[:, None] + log[None, :]) % 255].astype(np.uint8)
    mul[0, :] = 0
    mul[:, 0] = 0
    inv = np.zeros(256, dtype=np.uint8)
    inv[1:] = exp[(255 - log[a[1:]]) % 255]
    return exp, log, mul, inv


GF_EXP, GF_LOG, GF_MUL, GF_INV = _build_tables()


def gf_mul(a: int, b: int) -> int:
    return int(GF_MUL[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(GF_INV[a])


@lru_cache(maxsize=None)
def cauchy_matrix(k: int, m: int) -> np.ndarray:
    """``m x k`` parity coefficients ``1 / (x_i ^ y_j)`` with ``x_i = k + i``, ``y_j = j``."""
    x = np.arange(k, k + m)[:, None]
    y = np.arange(k)[None, :]
    c = GF_INV[x ^ y]
    c.setflags(write=False)
    return c


def generator_rows(k: int, m: int, rows: Sequence[int]) -> np.ndarray:
    out = np.zeros((len(rows), k), dtype=np.uint8)
    cauchy = cauchy_matrix(k, m)
    for r, idx in enumerate(rows):
        if idx < k:
            out[r, idx] = 1
        else:
            out[r] = cauchy[idx - k]
    return out


def gf_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a`` is ``(p, q)`` coefficients, ``b`` is ``(q, s)`` bytes."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.uint8)
    for j in range(a.shape[1]):
        out ^= np.take(GF_MUL[a[:, j]], b[j], axis=1)
    return out


def gf_invert(matrix: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inversion of a square matrix over GF(256)."""
    size = matrix.shape[0]
    work = np.concatenate([matrix.astype(np.uint8), np.eye(size, dtype=np.uint8)], axis=1)
    for col in range(size):
        pivots = np.flatnonzero(work[col:, col])
        if pivots.size == 0:
            raise ErasureError("singular matrix")
        p = col + int(pivots[0])
        if p != col:
            work[[col, p]] = work[[p, col]]
        work[col] = GF_MUL[GF_INV[work[col, col]], work[col]]
        factors = work[:, col].copy()
        factors[col] = 0
        rows = np.flatnonzero(factors)
        if rows.size:
            work[rows] ^= GF_MUL[factors[rows][:, None], work[col][None, :]]
    return work[:, size:]


@lru_cache(maxsize=4096)
def _decode_matrix(k: int, m: int, rows: tuple[int, ...]) -> np.ndarray:
    inv = gf_invert(generator_rows(k, m, rows))
    inv.setflags(write=False)
    return inv


@dataclass(frozen=True)
class Fragment:
    payload: bytes
    kind: str
    index_in_group: int


@dataclass(frozen=True)
class FaultTolerantGroup:
    level: int
    group_index: int
    k: int
    m: int
    fragments: tuple[Fragment, ...]

    @property
    def n(self) -> int:
        return self.k + self.m

    def payloads(self) -> list[bytes]:
        return [f.payload for f in self.fragments]


def _as_block(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if data.ndim != 2:
            raise ErasureError("data block must be 2-D (k, s)")
        return data.astype(np.uint8, copy=False)
    rows = [bytes(d) for d in data]
    if not rows:
        raise ErasureError("need at least one data fragment")
    size = len(rows[0])
    if any(len(r) != size for r in rows):
        raise ErasureError("ragged fragment sizes")
    return np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(len(rows), size)


def check_code(k: int, m: int) -> None:
    if k < 1 or m < 0:
        raise ErasureError(f"invalid code k={k}, m={m}")
    if k + m > MAX_GROUP:
        raise ErasureError(f"group size {k + m} exceeds {MAX_GROUP}")


def encode_parity(block, m: int) -> np.ndarray:
    """Parity rows ``(m, s)`` for a ``(k, s)`` data block."""
    block = _as_block(block)
    check_code(block.shape[0], m)
    if m == 0:
        return np.zeros((0, block.shape[1]), dtype=np.uint8)
    return gf_matmul(cauchy_matrix(block.shape[0], m), block)


def encode_group(data, m: int, level: int = 1, group_index: int = 0) -> FaultTolerantGroup:
    block = _as_block(data)
    parity = encode_parity(block, m)
    k = block.shape[0]
    frags = [Fragment(block[i].tobytes(), DATA, i) for i in range(k)]
    frags += [Fragment(parity[i].tobytes(), PARITY, k + i) for i in range(m)]
    return FaultTolerantGroup(level, group_index, k, m, tuple(frags))


def decode_block(present: Iterable[tuple[int, bytes | np.ndarray]], k: int, m: int) -> np.ndarray:
    """Rebuild the ``(k, s)`` data block from ``(index_in_group, payload)`` pairs."""
    check_code(k, m)
    chosen: dict[int, np.ndarray] = {}
    for idx, payload in present:
        if not 0 <= idx < k + m:
            raise ErasureError(f"fragment index {idx} outside group of {k + m}")
        if idx not in chosen:
            chosen[idx] = np.frombuffer(bytes(payload), dtype=np.uint8) if not isinstance(
                payload, np.ndarray
            ) else payload.astype(np.uint8, copy=False)
    if len(chosen) < k:
        raise UnrecoverableError(f"{len(chosen)} of {k + m} fragments present, need {k}")
    sizes = {p.shape[0] for p in chosen.values()}
    if len(sizes) != 1:
        raise ErasureError("ragged fragment sizes")
    # data rows first keeps the common case a plain copy
    rows = tuple(sorted(chosen)[:k])
    stacked = np.stack([chosen[i] for i in rows])
    if rows == tuple(range(k)):
        return stacked
    # only the missing data rows need the inverse; the rest are copies
    missing = [i for i in range(k) if i not in chosen]
    out = np.empty((k, stacked.shape[1]), dtype=np.uint8)
    for pos, idx in enumerate(rows):
        if idx < k:
            out[idx] = stacked[pos]
    out[missing] = gf_matmul(_decode_matrix(k, m, rows)[missing], stacked)
    return out


def decode_group(present: Iterable[tuple[int, bytes | np.ndarray]], k: int, m: int) -> list[bytes]:
    block = decode_block(present, k, m)
    return [row.tobytes() for row in block]


# -- level partitioning ---------------------------------------------------------


def fragment_count(length: int, s: int) -> int:
    return -(-length // s)


def split_fragments(data: bytes, s: int) -> np.ndarray:
    """Level bytes as ``(d, s)`` rows, the last row zero padded."""
    if s < 1:
        raise ErasureError("fragment size must be positive")
    d = fragment_count(len(data), s)
    buf = np.zeros(d * s, dtype=np.uint8)
    buf[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return buf.reshape(d, s)


@dataclass(frozen=True)
class LevelPartition:
    groups: tuple[np.ndarray, ...]
    length: int
    fragment_size: int

    def trailer(self) -> bytes:
        """4-byte big-endian original length, stored beside the fragments."""
        return self.length.to_bytes(4, "big")


def partition_level(data: bytes, s: int, k: int) -> LevelPartition:
    """Cut a level into ``(k, s)`` data blocks, zero padding the final one."""
    if k < 1:
        raise ErasureError("k must be positive")
    rows = split_fragments(data, s)
    groups = []
    for start in range(0, rows.shape[0], k):
        block = rows[start : start + k]
        if block.shape[0] < k:
            block = np.concatenate([block, np.zeros((k - block.shape[0], s), dtype=np.uint8)])
        groups.append(block)
    return LevelPartition(tuple(groups), len(data), s)


def reassemble(groups: Iterable[np.ndarray], length: int) -> bytes:
    parts = [np.asarray(g, dtype=np.uint8).ravel() for g in groups]
    joined = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
    if joined.size < length:
        raise ErasureError(f"only {joined.size} bytes for a {length}-byte level")
    return joined[:length].tobytes()
