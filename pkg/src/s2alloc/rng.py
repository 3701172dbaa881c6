"""PCG-XSH-RR 64/32 pseudo-random generator.

Small, fast, seedable generator with one independent stream per heap. The
XSH-RR output permutation and the seeding sequence follow the published
reference implementation, so output for a given (seed, stream) pair is a
portable, testable contract.
"""

from __future__ import annotations

import os
import threading

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1
_MULTIPLIER = 6364136223846793005


class PcgState:
    """One generator stream: 64-bit state plus a per-stream odd increment."""

    __slots__ = ("state", "inc")

    def __init__(self, seed: int, seq: int = 0):
        self.inc = (((seq << 1) | 1)) & _MASK64
        self.state = 0
        self.next32()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self.next32()

    def next32(self) -> int:
        """Advance the stream and return the next 32-bit output."""
        old = self.state
        self.state = (old * _MULTIPLIER + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & _MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _MASK32

    def uniform_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) with no modulo bias.

        Uses rejection below a threshold of 2**32 mod bound; when bound divides
        2**32 the threshold is zero and the mapping is exact with no rejection.
        """
        if not 1 <= bound <= (1 << 32):
            raise ValueError(f"bound must be in [1, 2**32], got {bound}")
        threshold = (1 << 32) % bound
        while True:
            raw = self.next32()
            if raw >= threshold:
                return raw % bound

    def coin(self, rate: float) -> bool:
        """Bernoulli draw: true with the given probability (consumes one output)."""
        if rate <= 0.0:
            self.next32()
            return False
        if rate >= 1.0:
            self.next32()
            return True
        return self.next32() < int(rate * (1 << 32))


def heap_rng(seed: int | None, thread_id: int) -> PcgState:
    """Build a heap's generator: configured seed (or OS entropy) mixed with the thread id.

    The thread id selects the stream, so heaps on different threads draw from
    distinct sequences even with a shared fixed seed.
    """
    if seed is None:
        material = int.from_bytes(os.urandom(8), "little")
    else:
        material = seed & _MASK64
    return PcgState(material ^ (thread_id & _MASK64), seq=thread_id)


def current_thread_id() -> int:
    return threading.get_ident()
