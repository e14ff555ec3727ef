"""Portable counter-based random numbers.

Raw 64-bit words come from the Philox-4x64 block cipher keyed by a 128-bit
key; the key is a BLAKE2b digest of the integer path ``(seed, *stream)``.
All transforms to uniforms, normals, permutations and categorical draws are
done here rather than through ``numpy.random.Generator`` so that the output
does not depend on numpy's distribution code, which is allowed to change
between releases.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Philox

_TWO_M53 = 2.0**-53


def _key(path):
    h = hashlib.blake2b(digest_size=16)
    for v in path:
        h.update(int(v).to_bytes(16, "little", signed=True))
    return np.frombuffer(h.digest(), dtype="<u8").astype(np.uint64)


class CounterRNG:
    """Stream of random variates addressed by an integer path.

    ``CounterRNG(7, 3)`` and ``CounterRNG(7).child(3)`` address the same
    stream.  Two streams with different paths are independent.
    """

    def __init__(self, seed: int, *stream: int):
        self.path = (int(seed),) + tuple(int(s) for s in stream)
        self._bits = Philox(key=_key(self.path))

    def child(self, *stream: int) -> "CounterRNG":
        return CounterRNG(*self.path, *stream)

    def raw(self, size) -> np.ndarray:
        n = int(np.prod(size))
        return self._bits.random_raw(n).astype(np.uint64).reshape(size)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform variates on the open interval (0, 1)."""
        shape = () if size is None else size
        u = ((self.raw(shape) >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
        return u if size is not None else float(u)

    def normal(self, size=None) -> np.ndarray:
        """Standard normal variates by the Box-Muller transform."""
        shape = () if size is None else size
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:n]
        z = z.reshape(shape)
        return z if size is not None else float(z)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, probs, size) -> np.ndarray:
        """Categorical draws with the given probabilities (inverse CDF)."""
        cdf = np.cumsum(np.asarray(probs, dtype=float))
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.uniform(size), side="right")
        return np.minimum(idx, len(cdf) - 1)
