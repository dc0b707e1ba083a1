"""Deterministic counter-based random number generator.

The generator is a pure 64-bit hash of a (key, counter) pair, so every value
is reproducible from the seed alone, independent of platform, call batching,
or evaluation order.  The exact stream (update rule, uniform mapping,
Box-Muller layout, substream derivation) is frozen in docs/rng.md; golden
values in tests/test_rng.py pin it.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError

# SplitMix64 constants (Steele, Lea & Flood 2014).
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# Distinct odd constant for substream key derivation (xxhash prime 2).
_STREAM = 0xC2B2AE3D27D4EB4F

_U64 = np.uint64
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; bijective on uint64. Operates on uint64 arrays."""
    z = z.astype(_U64, copy=True)
    z ^= z >> _U64(30)
    z *= _U64(_MIX1)
    z ^= z >> _U64(27)
    z *= _U64(_MIX2)
    z ^= z >> _U64(31)
    return z


def _hash_stream(key: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit words at counters start..start+count-1 for the given key."""
    counters = np.arange(start + 1, start + count + 1, dtype=_U64)
    return _mix64(np.asarray(key, dtype=_U64) + counters * _U64(_GOLDEN))


class Rng:
    """Seedable counter-based generator with documented substream splitting.

    State is (key, counter); each draw of n words advances the counter by n.
    ``substream(j)`` derives an independent child whose (key, counter) domain
    is disjoint from the parent's and from every other child's.
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, _key: int | None = None):
        if _key is not None:
            self.key = int(_key)
        else:
            seed = int(seed)
            if not 0 <= seed < 2**64:
                raise ParameterError(f"seed must fit in u64, got {seed}")
            self.key = int(_mix64(np.asarray([seed], dtype=_U64))[0])
        self.counter = 0

    def copy(self) -> "Rng":
        child = Rng.__new__(Rng)
        child.key = self.key
        child.counter = self.counter
        return child

    def substream(self, index: int) -> "Rng":
        """Child generator j: key' = mix64(key XOR (j+1)*STREAM), counter 0."""
        if index < 0:
            raise ParameterError("substream index must be >= 0")
        salt = (np.asarray([index + 1], dtype=_U64) * _U64(_STREAM))
        key = _mix64(np.asarray([self.key], dtype=_U64) ^ salt)
        return Rng(0, _key=int(key[0]))

    def substream_keys(self, count: int) -> np.ndarray:
        """Keys of substreams 0..count-1 as a uint64 array (vectorized split)."""
        salts = np.arange(1, count + 1, dtype=_U64) * _U64(_STREAM)
        return _mix64(np.asarray(self.key, dtype=_U64) ^ salts)

    def _next_words(self, count: int) -> np.ndarray:
        words = _hash_stream(self.key, self.counter, count)
        self.counter += count
        return words

    def uniform(self, shape=(), dtype=np.float32) -> np.ndarray:
        """i.i.d. uniforms on [0, 1): top 53 bits of each word *2^-53."""
        shape = _as_shape(shape)
        n = math.prod(shape)
        words = self._next_words(n)
        u = (words >> _U64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape).astype(dtype, copy=False)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller on the uniform stream.

        For n outputs, 2*ceil(n/2) words are consumed: the first half give
        u1 on (0, 1], the second half u2 on [0, 1); the output is
        concat(r*cos(2*pi*u2), r*sin(2*pi*u2))[:n] with r = sqrt(-2 ln u1).
        """
        shape = _as_shape(shape)
        n = math.prod(shape)
        if n == 0:
            return np.zeros(shape, dtype=dtype)
        m = (n + 1) // 2
        words = self._next_words(2 * m)
        u1 = ((words[:m] >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[m:] >> _U64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """i.i.d. ints in [low, high): floor(u*(high-low)) + low on the
        uniform stream (scaling bias < 2^-40 for desk-scale ranges)."""
        if high <= low:
            raise ParameterError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape, dtype=np.float64)
        return (np.floor(u * (high - low)) + low).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): stable argsort of n uniforms."""
        u = self.uniform((n,), dtype=np.float64)
        return np.argsort(u, kind="stable")


def normal_for_keys(keys: np.ndarray, n_per: int, dtype=np.float32) -> np.ndarray:
    """Standard normals, n_per per key, shape (len(keys), n_per).

    Row k equals Rng with that key drawing ``normal((n_per,))`` from counter 0;
    used to give every sample of a batch its own documented substream.
    """
    keys = np.asarray(keys, dtype=_U64)
    m = (n_per + 1) // 2
    counters = np.arange(1, 2 * m + 1, dtype=_U64)
    words = _mix64(keys[:, None] + counters[None, :] * _U64(_GOLDEN))
    u1 = ((words[:, :m] >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (words[:, m:] >> _U64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)[:, :n_per]
    return z.astype(dtype, copy=False)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
