"""xorshift64* pseudo-random generator.

State update uses shifts (12, 25, 27) followed by multiplication with
0x2545F4914F6CDD1D, as in Vigna's xorshift64*. Floats take the top 53 bits
of the output. The stream is fully defined by the 64-bit state, so datasets
and weight initialisations reproduce on any platform.
"""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
MULTIPLIER = 0x2545F4914F6CDD1D
_SPLIT_GAMMA = 0x9E3779B97F4A7C15


def _splitmix(x: int) -> int:
    x = (x + _SPLIT_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (order sensitive)."""
    h = 0x6A09E667F3BCC908
    for p in parts:
        h = _splitmix(h ^ (int(p) & MASK64))
    return h


class XorShift64Star:
    def __init__(self, seed: int):
        state = _splitmix(int(seed) & MASK64)
        self.state = state or 0x853C49E6748FEA9B

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * MULTIPLIER) & MASK64

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        return low + int(self.random() * (high - low + 1))

    def normal(self) -> float:
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def random_array(self, shape: Sequence[int]) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        vals: List[float] = [0.0] * n
        x = self.state
        for i in range(n):
            x ^= x >> 12
            x ^= (x << 25) & MASK64
            x ^= x >> 27
            vals[i] = (((x * MULTIPLIER) & MASK64) >> 11) * (1.0 / 9007199254740992.0)
        self.state = x
        return np.array(vals, dtype=np.float64).reshape(shape)

    def uniform_array(self, low: float, high: float, shape: Sequence[int]) -> np.ndarray:
        return low + (high - low) * self.random_array(shape)

    def get_state(self) -> int:
        return self.state

    def set_state(self, state: int) -> None:
        self.state = int(state) & MASK64
