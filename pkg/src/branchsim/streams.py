"""Splittable counter-based random streams.

Every stream is a 64-bit key plus a draw counter.  Draw ``i`` of a stream is
a SplitMix64 finalizer applied to ``key + i * golden``; child streams get
keys hashed from the parent key and a child index.  Because a draw depends
only on ``(key, counter)``, a particle's randomness depends only on its
genealogical label, never on the order in which particles or replicas are
processed.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 2.0 ** -53

MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.atleast_1d(np.asarray(z, dtype=np.uint64))
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def derive(keys: np.ndarray, index) -> np.ndarray:
    """Child keys for ``index`` (scalar or array broadcast against ``keys``)."""
    idx = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    return mix64(np.atleast_1d(np.asarray(keys, dtype=np.uint64)) ^ mix64(idx * _GOLDEN + _M2))


def uniforms(keys: np.ndarray, counters: np.ndarray, k: int) -> np.ndarray:
    """``k`` uniforms in (0, 1) per row: draws ``counters .. counters+k-1``."""
    keys = np.asarray(keys, dtype=np.uint64)
    c = np.asarray(counters, dtype=np.uint64)[:, None] + np.arange(k, dtype=np.uint64)
    z = mix64(keys[:, None] + c * _GOLDEN)
    return ((z >> _S11).astype(np.float64) + 0.5) * _TWO53


def normals_from(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Box-Muller transform (cosine branch) of two uniform arrays."""
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class SeededStream:
    """A derivable stream identified by a master seed and an index path.

    ``child(i, j, ...)`` returns an independent stream for the given
    derivation path (replica, lineage, ...).  Sequential draws from one
    stream advance its private counter; that counter is the only mutable
    state, so a stream must not be shared between concurrent callers.
    """

    def __init__(self, master_seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(master_seed) <= MASK64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        self.master_seed = int(master_seed)
        self.path = tuple(int(i) for i in path)
        key = mix64(np.array([self.master_seed], dtype=np.uint64))
        for i in self.path:
            key = derive(key, i)
        self._key = key
        self.counter = 0

    @property
    def key(self) -> np.uint64:
        return self._key[0]

    def child(self, *indices: int) -> "SeededStream":
        return SeededStream(self.master_seed, self.path + tuple(indices))

    def child_keys(self, indices) -> np.ndarray:
        """Keys of ``child(i)`` for every ``i`` in ``indices``, vectorized."""
        idx = np.asarray(indices, dtype=np.uint64)
        return derive(np.broadcast_to(self._key, idx.shape), idx)

    def uniform(self, size: int) -> np.ndarray:
        u = uniforms(self._key, np.array([self.counter], dtype=np.uint64), size)[0]
        self.counter += size
        return u

    def normal(self, size: int) -> np.ndarray:
        u = self.uniform(2 * size)
        return normals_from(u[:size], u[size:])

    def exponential(self, size: int) -> np.ndarray:
        return -np.log(self.uniform(size))

    def generator(self) -> np.random.Generator:
        """A numpy generator keyed by this stream (for block-level sampling)."""
        return np.random.Generator(np.random.Philox(key=int(self.key)))

    def __repr__(self) -> str:
        return f"SeededStream(seed={self.master_seed}, path={self.path}, counter={self.counter})"
