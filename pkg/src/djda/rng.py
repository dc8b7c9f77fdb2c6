"""SplitMix64, the single random source used for data, init and shuffling.

The generator is counter based: output ``i`` (0-based) of a stream seeded
with ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Doubles in [0, 1) take the top 53 bits: ``(u >> 11) * 2**-53``. Normals use
Box-Muller on consecutive pairs of doubles, ``u1`` replaced by ``1 - u1`` so
the log argument is never zero; only the cosine branch is used. Anything
implementing those few lines reproduces the synthetic datasets bit for bit.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(*parts):
    """Fold integers into one 64-bit seed (used for per-epoch / per-fold streams)."""
    acc = 0x6A09E667F3BCC908
    for p in parts:
        acc = (acc ^ (int(p) & MASK64)) & MASK64
        acc = int(_mix(np.array([acc], dtype=np.uint64))[0])
    return acc


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self, n):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(GOLDEN)) & MASK64
        return out

    def uniform(self, size=None, low=0.0, high=1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size, loc=0.0, scale=1.0):
        n = int(np.prod(size))
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (loc + scale * z).reshape(size)

    def integers(self, high, size):
        """Uniform ints in [0, high) via multiply-shift on the top 32 bits."""
        u = self.next_u64(int(size)) >> np.uint64(32)
        return ((u * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
