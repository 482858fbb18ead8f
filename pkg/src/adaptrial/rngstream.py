"""Counter-based random streams for reproducible parallel simulation.

Every random quantity in the engine is drawn from a stream addressed by
(seed material, purpose tag, counter), so that any block of the
randomization list, any patient's outcome draw, or any replicate's MC
stream can be regenerated in isolation, in any order, on any worker.

The workhorse is a vectorized Philox4x64-10 implementation that is
bit-compatible with ``numpy.random.Philox`` (verified in the test suite),
evaluated here directly on arrays of counters/keys because numpy exposes
no batched counter API.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_U53 = np.uint64(11)
_INV53 = float(2.0 ** -53)


class StreamTag(IntEnum):
    """Purpose tags separating the independent streams of one replicate."""

    BLOCKS = 0
    OUTCOMES = 1
    POSTERIOR_MC = 2
    THOMPSON = 3
    ARRIVALS = 4


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # 64x64 -> 128 bit product, high and low words, via 32-bit partials.
    lo = a * b
    ah, al = a >> _S32, a & _LO32
    bh, bl = b >> _S32, b & _LO32
    mid = ((al * bl) >> _S32) + ((ah * bl) & _LO32) + ((al * bh) & _LO32)
    hi = ah * bh + ((ah * bl) >> _S32) + ((al * bh) >> _S32) + (mid >> _S32)
    return hi, lo


def philox4x64(c0, c1, c2, c3, k0, k1):
    """One Philox4x64-10 block: four 64-bit words per counter.

    All arguments broadcast against each other as uint64 arrays.
    """
    c0 = np.asarray(c0, dtype=np.uint64)
    c1 = np.asarray(c1, dtype=np.uint64)
    c2 = np.asarray(c2, dtype=np.uint64)
    c3 = np.asarray(c3, dtype=np.uint64)
    k0 = np.asarray(k0, dtype=np.uint64).copy()
    k1 = np.asarray(k1, dtype=np.uint64).copy()
    c0, c1, c2, c3, k0, k1 = np.broadcast_arrays(c0, c1, c2, c3, k0, k1)
    k0, k1 = k0.copy(), k1.copy()
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


def to_uniform(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to float64 uniforms on [0, 1)."""
    return (np.asarray(words, dtype=np.uint64) >> _U53) * _INV53


def derive_key(seed, spawn_key: tuple[int, ...]) -> tuple[int, int]:
    """Two key words for a Philox stream addressed by (seed, spawn path)."""
    state = SeedSequence(seed, spawn_key=spawn_key).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


class CounterStream:
    """Random-access uniform stream: value i is a pure function of (key, i)."""

    def __init__(self, key: tuple[int, int]):
        self._k0 = np.uint64(key[0])
        self._k1 = np.uint64(key[1])

    def uniforms(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.uint64)
        w0, _, _, _ = philox4x64(idx, 0, 0, 0, self._k0, self._k1)
        return to_uniform(w0)

    def uniform(self, index: int) -> float:
        return float(self.uniforms(np.uint64(index)))


def randbelow(key: tuple[int, int], c0, c1, m: int) -> np.ndarray:
    """Unbiased integers on [0, m) addressed by counters (c0, c1).

    Masked rejection: candidates are the low bits of successive Philox
    words (attempt counter in lane 2), accepted when < m. Exactly
    uniform for any m >= 1.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    c0 = np.atleast_1d(np.asarray(c0, dtype=np.uint64))
    c1 = np.broadcast_to(np.asarray(c1, dtype=np.uint64), c0.shape)
    out = np.zeros(c0.shape, dtype=np.int64)
    if m == 1:
        return out
    mask = np.uint64((1 << int(m - 1).bit_length()) - 1)
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    todo = np.ones(c0.shape, dtype=bool)
    attempt = 0
    while todo.any():
        idxs = np.flatnonzero(todo)
        w0, _, _, _ = philox4x64(c0[idxs], c1[idxs], np.uint64(attempt), 0, k0, k1)
        cand = (w0 & mask).astype(np.int64)
        ok = cand < m
        out[idxs[ok]] = cand[ok]
        todo[idxs[ok]] = False
        attempt += 1
    return out


def replicate_seed(master_seed: int, design_index: int, scenario_index: int,
                   replicate_index: int) -> int:
    """Positional replicate seed: adding designs never reshuffles cells."""
    state = SeedSequence(
        master_seed, spawn_key=(design_index, scenario_index, replicate_index)
    ).generate_state(2, np.uint64)
    return int(state[0]) | (int(state[1]) << 64)


def stream_key(trial_seed: int, tag: StreamTag) -> tuple[int, int]:
    return derive_key(trial_seed, (int(tag),))


def mc_generator(trial_seed: int) -> Generator:
    """Sequential generator for posterior Monte Carlo draws of one trial."""
    return Generator(Philox(SeedSequence(trial_seed, spawn_key=(int(StreamTag.POSTERIOR_MC),))))


def thompson_generator_key(trial_seed: int) -> tuple[int, int]:
    return stream_key(trial_seed, StreamTag.THOMPSON)
