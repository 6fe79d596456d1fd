"""Deterministic random streams: splitmix64-seeded xoshiro256**.

Scalar draws step a single xoshiro256** state held in Python ints. Bulk draws seed
``LANES`` independent xoshiro256** lanes from the main stream and step them together in
numpy uint64 arithmetic, so every platform sees the same numbers.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
LANES = 256

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _rotl_vec(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = words

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * self.random()

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return low + x % span

    def choice(self, items: Sequence):
        return items[self.integers(0, len(items))]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())

    # --- bulk draws ---

    def _lane_u64(self, n: int) -> np.ndarray:
        lanes = max(1, min(LANES, n))
        sm = self.next_u64()
        init = np.empty((4, lanes), dtype=np.uint64)
        for lane in range(lanes):
            for w in range(4):
                sm, out = splitmix64(sm)
                init[w, lane] = out
        s0, s1, s2, s3 = init[0], init[1], init[2], init[3]
        steps = -(-n // lanes)
        out = np.empty((steps, lanes), dtype=np.uint64)
        five, nine, seventeen = np.uint64(5), np.uint64(9), np.uint64(17)
        for i in range(steps):
            out[i] = _rotl_vec(s1 * five, 7) * nine
            t = s1 << seventeen
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = _rotl_vec(s3, 45)
        return out.reshape(-1)[:n]

    def random_array(self, shape: int | Sequence[int]) -> np.ndarray:
        """Array of uniform floats in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        if n == 0:
            return np.zeros(shape)
        bits = self._lane_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * (1.0 / (1 << 53))).reshape(shape)

    def uniform_array(self, low: float, high: float, shape: int | Sequence[int]) -> np.ndarray:
        return low + (high - low) * self.random_array(shape)

    def normal_array(self, shape: int | Sequence[int], std: float = 1.0) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        half = -(-n // 2)
        u1 = 1.0 - self.random_array(half)
        u2 = self.random_array(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
        return std * z[:n].reshape(shape)
