"""Deterministic random number generation.

A single root seed expands into independent named streams via a
splitmix64 hash of the (seed, label) pair, so every component of a run
draws from its own xoshiro256** generator. Results are identical across
backends and platforms because everything here is integer arithmetic
plus a Box-Muller transform in binary64.
"""

import math

_MASK = (1 << 64) - 1


def _splitmix64(state):
    # Advances the state and returns (new_state, output word).
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _label_hash(label):
    h = 0xCBF29CE484222325
    for ch in label.encode("utf-8"):
        h ^= ch
        h = (h * 0x100000001B3) & _MASK
    return h


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** generator seeded from a root seed and a stream label."""

    def __init__(self, seed, label=""):
        if not isinstance(seed, int):
            raise TypeError(f"seed must be int, got {type(seed).__name__}")
        self.seed = seed
        self.label = label
        state = (seed ^ _label_hash(label)) & _MASK
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        self._s = s
        self._spare = None  # cached second Box-Muller deviate

    def split(self, label):
        """Derive an independent stream named by ``label``."""
        return Rng(self.seed, self.label + "/" + label)

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        """Uniform float64 in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo, hi):
        """Uniform integer in [lo, hi). Uses rejection to avoid modulo bias."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        span = hi - lo
        # Largest multiple of span that fits in 64 bits.
        limit = (_MASK + 1) - ((_MASK + 1) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + (x % span)

    def normal(self):
        """Standard normal deviate via Box-Muller (polar-free form)."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        # u1 must be strictly positive for the log.
        u1 = 0.0
        while u1 == 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def fill_normal(self, buf, scale=1.0):
        """Fill a float buffer with N(0, scale^2) deviates in index order."""
        for i in range(len(buf)):
            buf[i] = self.normal() * scale

    def fill_uniform(self, buf, lo=0.0, hi=1.0):
        width = hi - lo
        for i in range(len(buf)):
            buf[i] = lo + width * self.uniform()

    def shuffle(self, seq):
        """Fisher-Yates shuffle in place."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(0, i + 1)
            seq[i], seq[j] = seq[j], seq[i]
