"""Deterministic counter-based random number generation.

The generator is splitmix64 used in counter mode: output ``i`` of a stream
with seed ``s`` is ``mix64(s + (i + 1) * GAMMA)`` where GAMMA is the 64-bit
golden-ratio increment and mix64 is the standard splitmix64 finalizer.
Because each output is a pure function of (seed, index), the stream is
reproducible on any platform, trivially vectorizable, and its state is the
pair (seed, counter), which serializes exactly.

Floating-point derivation: uniforms take the top 53 bits of an output
scaled by 2**-53; normals come from Box-Muller pairs. Integer draws use
modulo reduction (bias below 2**-32 for the small ranges used here).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)
_U64 = np.uint64


def mix64(z):
    """splitmix64 finalizer on uint64 scalars or arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
    return z


def fnv1a64(data: bytes) -> int:
    """FNV-1a hash of a byte string, used for stable stream and vocab keys."""
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ _U64(b)) * _FNV_PRIME
    return int(h)


class Rng:
    """Counter-based stream with exact (seed, counter) state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    # -- state ------------------------------------------------------------

    @property
    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, counter = state
        return cls(seed, counter)

    def split(self, key) -> "Rng":
        """Independent child stream derived from a string or integer key.

        Children do not advance the parent counter, so the set of streams
        drawn from a run depends only on the keys used, not on call order.
        """
        if isinstance(key, str):
            key_int = fnv1a64(key.encode("utf-8"))
        else:
            key_int = int(key) & 0xFFFFFFFFFFFFFFFF
        with np.errstate(over="ignore"):
            child = mix64(_U64(self.seed) ^ mix64(_U64(key_int) + GAMMA))
        return Rng(int(child))

    # -- raw draws ---------------------------------------------------------

    def _raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValidationError(f"raw draw count must be >= 0, got {n}")
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(_U64(self.seed) + idx * GAMMA)

    # -- typed draws -------------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal float64 via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1)
        u1 = ((raw[:m] >> _U64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (raw[m:] >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Integers in [lo, hi). Modulo reduction; bias < 2**-32 here."""
        if hi <= lo:
            raise ValidationError(f"empty integer range [{lo}, {hi})")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = _U64(hi - lo)
        vals = (self._raw(n) % span).astype(np.int64) + lo
        return vals.reshape(shape) if shape else int(vals[0])

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def shuffle(self, items: list) -> list:
        """Fisher-Yates in place; also returns the list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items
