"""Sequential block randomization list.

The allocation list is a concatenation of independent random permutations
of the arm indexes {0, ..., K}. Each block is shuffled by Fisher-Yates
driven by a counter-based generator keyed on (seed, block index), so any
position of the conceptually infinite list is computable without
generating its predecessors, and the list is bit-identical across runs,
platforms and worker processes.
"""

from __future__ import annotations

import numpy as np

from .rngstream import StreamTag, derive_key, randbelow


class RandomizationList:
    """Fixed allocation sequence r(1), r(2), ... over arms {0, ..., K}."""

    def __init__(self, seed: int, num_arms: int):
        if num_arms < 2:
            raise ValueError(f"num_arms must be >= 2, got {num_arms}")
        self.seed = seed
        self.num_arms = int(num_arms)
        self._key = derive_key(seed, (int(StreamTag.BLOCKS),))
        self._arms = np.empty(0, dtype=np.int8)  # materialized prefix

    def block(self, b: int) -> np.ndarray:
        """Permutation of {0, ..., K} occupying list positions b(K+1)+1 .. (b+1)(K+1)."""
        return self.blocks(b, b + 1)[0]

    def blocks(self, start: int, stop: int) -> np.ndarray:
        """Blocks start..stop-1 as an (stop-start, K+1) array."""
        if start < 0 or stop < start:
            raise ValueError("invalid block range")
        m = self.num_arms
        n_blocks = stop - start
        ids = np.arange(start, stop, dtype=np.uint64)
        perms = np.tile(np.arange(m, dtype=np.int8), (n_blocks, 1))
        rows = np.arange(n_blocks)
        for j in range(m - 1, 0, -1):
            r = randbelow(self._key, ids, np.uint64(j), j + 1)
            tmp = perms[rows, j].copy()
            perms[rows, j] = perms[rows, r]
            perms[rows, r] = tmp
        return perms

    def _extend_to(self, n: int) -> None:
        if n <= self._arms.size:
            return
        m = self.num_arms
        have = self._arms.size // m
        need = -(-n // m) + 1
        new = self.blocks(have, need).reshape(-1)
        self._arms = np.concatenate([self._arms, new])

    def arm_at(self, n: int) -> int:
        """Arm r(n) for list index n >= 1."""
        if n < 1:
            raise ValueError(f"list index must be >= 1, got {n}")
        self._extend_to(n)
        return int(self._arms[n - 1])

    def arms_upto(self, n: int) -> np.ndarray:
        """r(1..n) as an int8 array (index 0 is r(1)); precompute for workers."""
        self._extend_to(n)
        return self._arms[:n]


def generate(seed: int, num_arms: int) -> RandomizationList:
    """Build the allocation list for num_arms = K+1 treatment arms."""
    return RandomizationList(seed, num_arms)
