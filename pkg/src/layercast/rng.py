"""SplitMix64: the only randomness source, so every stream is reproducible bit for bit."""

from __future__ import annotations

import numpy as np
import numpy.typing as npt

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = (z ^ (z >> 30)) * _MIX1 & MASK64
    z = (z ^ (z >> 27)) * _MIX2 & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int = 0) -> None:
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_double(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * 2.0**-53

    def take(self, count: int) -> npt.NDArray[np.uint64]:
        """The next ``count`` outputs, vectorised; advances the state like ``count`` calls."""
        if count < 0:
            raise ValueError("SplitMix64 count must not be negative")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * GAMMA) & MASK64
        return z

    def uniform(self, count: int, low: float, high: float) -> npt.NDArray[np.float64]:
        unit = (self.take(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * unit


def derive_seed(seed: int, *components: int) -> int:
    """Deterministically combine a base seed with integer components (e.g. run, step)."""
    derived = seed & MASK64
    for component in components:
        derived = mix64(derived ^ mix64((component * GAMMA) & MASK64))
    return derived


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of ``range(n)`` driven by SplitMix64(seed).

    For i = n−1 down to 1, swap position i with ``next() % (i + 1)``.
    """
    order = list(range(n))
    stream = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = stream.next() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order
