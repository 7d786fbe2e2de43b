"""Deterministic 64-bit PRNG used for every random draw in the project.

xoshiro256** seeded through splitmix64, implemented on plain Python ints so
that a given (seed, stream) pair produces the same bit stream on every
platform and interpreter version. `stream` selects an independent substream
(world spawning and action selection use separate streams so that paired
experiments visit identical worlds).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STREAM_SALT = 0xBF58476D1CE4E5B9


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator; all methods consume a fixed number of draws."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int, stream: int = 0):
        x = (int(seed) ^ (int(stream) * _STREAM_SALT)) & _MASK
        x, self._s0 = _splitmix64(x)
        x, self._s1 = _splitmix64(x)
        x, self._s2 = _splitmix64(x)
        x, self._s3 = _splitmix64(x)
        if not (self._s0 | self._s1 | self._s2 | self._s3):
            self._s0 = _GOLDEN  # all-zero state is the one invalid xoshiro state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s1 * 5) & _MASK
        result = (((x << 7 | x >> 57) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s0, self._s1, self._s2 = s0, s1, s2
        self._s3 = (s3 << 45 | s3 >> 19) & _MASK
        return result

    def random(self) -> float:
        """Uniform float64 in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 1.1102230246251565e-16

    def randrange(self, n: int) -> int:
        """Uniform int in [0, n) via Lemire multiply-shift (bias < n/2^64)."""
        return (self.next_u64() * n) >> 64

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(seq) - 1, 0, -1):
            j = (self.next_u64() * (i + 1)) >> 64
            seq[i], seq[j] = seq[j], seq[i]
