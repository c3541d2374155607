"""Portable seeded generator: splitmix64 seeding, xoshiro256++ core.

Used wherever outputs must be reproducible bit for bit (noise, subsampling).
Doubles are formed from the top 53 bits; normals come from Box-Muller in
cosine/sine pairs.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """Advance a splitmix64 state; return (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256pp:
    def __init__(self, seed: int):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        return self.fill_u64(1)[0]

    def fill_u64(self, n: int) -> list:
        s0, s1, s2, s3 = self.s
        m = _MASK
        out = [0] * n
        for i in range(n):
            t = (s0 + s3) & m
            out[i] = ((((t << 23) | (t >> 41)) & m) + s0) & m
            t = (s1 << 17) & m
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & m
        self.s = [s0, s1, s2, s3]
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        raw = np.array(self.fill_u64(n), dtype=np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """n standard normal samples; consumes 2 * ceil(n / 2) raw draws."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u lies in (0, 1]
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return z.reshape(-1)[:n]
