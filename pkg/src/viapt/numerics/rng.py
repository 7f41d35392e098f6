"""Deterministic counter-based random sampling.

Every variate is a pure function of (seed, counter): replaying from a
checkpointed counter reproduces the stream exactly, and disjoint counter
ranges give independent sub-streams regardless of evaluation order. One
standard-normal sample consumes exactly one counter tick (Box-Muller on the
two 32-bit halves of a mixed 64-bit word), so offset arithmetic like
"round r starts at r*n" partitions the stream without overlap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALGORITHM_ID = "splitmix64-boxmuller-v1"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_TWO_PI = 2.0 * np.pi
_INV_2_32 = 2.0 ** -32
_INV_2_53 = 2.0 ** -53


def _mix_bits(seeds, counters):
    """splitmix64 finalizer over seed + golden-ratio-stepped counters."""
    old = np.seterr(over="ignore")
    try:
        z = np.uint64(seeds) + _GOLDEN * (np.asarray(counters, dtype=np.uint64) + np.uint64(1))
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))
    finally:
        np.seterr(**old)


def hash_name(name: str) -> int:
    """FNV-1a of a tensor/stream name, for deriving per-name sub-seeds."""
    h = _FNV_OFFSET
    old = np.seterr(over="ignore")
    try:
        for b in name.encode("utf-8"):
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    finally:
        np.seterr(**old)
    return int(h)


def _normals_from_bits(bits: np.ndarray) -> np.ndarray:
    """Box-Muller cosine branch on the two 32-bit halves of each word."""
    # u1 in (0, 1] so log(u1) is finite; u2 in [0, 1)
    u1 = ((bits >> np.uint64(32)).astype(np.float64) + 1.0) * _INV_2_32
    u2 = (bits & np.uint64(0xFFFFFFFF)).astype(np.float64) * _INV_2_32
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def gaussian_block(seeds, counter_start: int, n: int, dtype=np.float32) -> np.ndarray:
    """Standard normals for several streams at once: row i reads seeds[i]'s
    stream at counters [counter_start, counter_start + n)."""
    counters = np.arange(counter_start, counter_start + n, dtype=np.uint64)
    bits = _mix_bits(np.asarray(seeds, dtype=np.uint64).reshape(-1, 1), counters[None, :])
    return _normals_from_bits(bits).astype(dtype)


@dataclass
class RngState:
    """Position in a deterministic random stream.

    The algorithm identifier is persisted in checkpoints; loading a stream
    produced by a different algorithm is rejected there.
    """

    seed: int
    counter: int = 0
    algorithm: str = field(default=ALGORITHM_ID)

    def clone(self) -> "RngState":
        return RngState(self.seed, self.counter, self.algorithm)

    def at(self, counter: int) -> "RngState":
        return RngState(self.seed, counter, self.algorithm)

    def derive(self, name: str) -> "RngState":
        """Independent sub-stream keyed by name (e.g. one per parameter tensor)."""
        return RngState(int(_mix_bits(self.seed, hash_name(name))), 0, self.algorithm)

    # -- sampling -----------------------------------------------------------

    def _take(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix_bits(self.seed, counters)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        """i.i.d. uniforms in [low, high); one counter tick per value."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._take(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = low + (high - low) * u
        return out.reshape(shape).astype(dtype)

    def gaussian(self, shape, dtype=np.float32) -> np.ndarray:
        """i.i.d. standard normals; one counter tick per value.

        Each 64-bit word is split into two 32-bit uniforms and mapped through
        the cosine branch of Box-Muller, whose marginal is exactly N(0, 1).
        No rejection, so counter consumption equals sample count.
        """
        n = int(np.prod(shape)) if shape else 1
        return _normals_from_bits(self._take(n)).reshape(shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniform keys)."""
        keys = self.uniform((n,), dtype=np.float64)
        return np.argsort(keys, kind="stable")


def sample_gaussian(rng: RngState, shape, dtype=np.float32) -> np.ndarray:
    """Module-level alias; advances rng.counter deterministically."""
    return rng.gaussian(shape, dtype=dtype)
