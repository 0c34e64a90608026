"""Portable seeded random source.

Every run draws from a single SplitMix64 stream so that event logs can be
reproduced bit-for-bit by any implementation of the same generator:

    state = (state + 0x9E3779B97F4A7C15) mod 2**64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    output = z ^ (z >> 31)

Uniform doubles use the top 53 bits.  Normal deviates use the cosine branch
of Box-Muller, consuming exactly two uniforms per deviate.
"""
import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        # rejection sampling keeps the result unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if sigma == 0:
            return mu
        u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def bernoulli(self, p: float) -> bool:
        if p <= 0:
            return False
        return self.random() < p

    def shuffle(self, items: list) -> None:
        # Fisher-Yates, high index first
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def bits(self, n: int) -> str:
        return "".join("1" if self.next_u64() >> 63 else "0" for _ in range(n))


def derive_seed(seed: int, label: str) -> int:
    """Independent sub-seed for a named purpose (victim layout, calibration...)."""
    h = seed & MASK64
    for ch in label.encode():
        h = SplitMix64(h ^ ch).next_u64()
    return h
