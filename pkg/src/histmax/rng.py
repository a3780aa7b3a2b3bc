"""Portable pseudo-random generation: xoshiro256** seeded through splitmix64.

The stream depends only on the seed, so generated tensors are bit-identical
on every platform. Reference values (seed 0)::

    splitmix64:   0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F
    xoshiro256**: see ``tests/test_rng.py`` for the frozen first outputs

Uniform doubles take the top 53 bits; normals use the Box-Muller transform.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state):
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed=0):
        sm = int(seed) & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s
        self._spare = None

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self):
        if self._spare is not None:
            x, self._spare = self._spare, None
            return x
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, shape):
        size = int(np.prod(shape))
        nrm = self.normal
        return np.array([nrm() for _ in range(size)], dtype=np.float64).reshape(shape)

    def uniforms(self, shape):
        size = int(np.prod(shape))
        rnd = self.random
        return np.array([rnd() for _ in range(size)], dtype=np.float64).reshape(shape)
