"""Counter-based random streams.

Each draw call builds a fresh Philox generator keyed by the stream's key and
positioned at the stream's counter, then bumps the counter. Draws therefore
depend only on ``(key, counter)``, never on what other streams have done.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_key(seed, label=None):
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    if label is not None:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    digest = h.digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


class RandomStream:
    """A labelled counter-based stream.

    Parameters
    ----------
    seed : int
        64-bit master seed.
    counter : int
        Index of the next draw call.
    """

    def __init__(self, seed, counter=0, _path=()):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)
        self._path = tuple(_path)
        self._key = _derive_key(self.seed, "/".join(self._path) if self._path else None)

    def __repr__(self):
        label = "/".join(self._path) or "<root>"
        return f"RandomStream(seed={self.seed}, label={label!r}, counter={self.counter})"

    def spawn(self, label):
        """Independent child stream identified by ``label``."""
        return RandomStream(self.seed, 0, self._path + (str(label),))

    def _generator(self):
        ctr = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(counter=ctr, key=self._key))

    def normal(self, shape, dtype=np.float64):
        return self._generator().standard_normal(shape, dtype=dtype)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        """Integers in ``[low, high)``."""
        return self._generator().integers(low, high, size=shape)

    def choice(self, probs, shape=None):
        """Categorical draws with probabilities ``probs``."""
        return self._generator().choice(len(probs), size=shape, p=np.asarray(probs, dtype=np.float64))

    def seed64(self):
        """A derived 64-bit integer, e.g. to record a per-item seed."""
        return int(self._generator().integers(0, 2 ** 63, dtype=np.int64))


def rng_normal(shape, stream, dtype=np.float64):
    """Standard normal draws from ``stream`` (advances its counter)."""
    return stream.normal(shape, dtype=dtype)
