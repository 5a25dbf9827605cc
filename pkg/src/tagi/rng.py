"""xoshiro256** generator seeded through splitmix64.

Pure Python so that a given seed yields the same stream on every platform,
independent of numpy's bit generators.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(*parts: int | str) -> int:
    """Mix integers/strings into one 64-bit seed (stable across runs)."""
    state = 0x243F6A8885A308D3
    for p in parts:
        if isinstance(p, str):
            vals = list(p.encode("utf-8")) + [len(p)]
        else:
            vals = [int(p) & _MASK]
        for v in vals:
            state, out = splitmix64(state ^ v)
            state ^= out
    return splitmix64(state)[1]


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** with a handful of sampling helpers."""

    def __init__(self, seed: int = 0):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (rejection sampling, unbiased)."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def normal(self, n: int) -> np.ndarray:
        """n standard normal draws via Box-Muller."""
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            u1 = self.random()
            u2 = self.random()
            if u1 <= 0.0:
                continue
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            if i + 1 < n:
                out[i + 1] = r * math.sin(2.0 * math.pi * u2)
            i += 2
        return out

    def get_state(self) -> list[int]:
        return list(self.s)

    def set_state(self, state: list[int]) -> None:
        if len(state) != 4:
            raise ValueError("xoshiro256** state has four 64-bit words")
        self.s = [int(v) & _MASK for v in state]
