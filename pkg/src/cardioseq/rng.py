"""Deterministic, splittable random number generation.

All stochastic behaviour in the package (weight init, dropout, augmentation,
shuffling) draws from named substreams of a single 64-bit seed.  A substream
is a Philox counter-based generator keyed by a BLAKE2b hash of
``(seed, label, indices...)``, so the values drawn from one substream never
depend on how much any other substream has been consumed.  That makes results
independent of evaluation order (and therefore safe to parallelise).
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class DeterministicRng:
    """Root of a tree of independent random substreams.

    Identical seeds produce identical streams.  Substreams are addressed by a
    string label plus optional integer indices, e.g.
    ``rng.substream("augment", sample_index, epoch)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def substream_key(self, label: str, *indices: int) -> int:
        """128-bit Philox key for the named substream."""
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<Q", self.seed))
        raw = label.encode("utf-8")
        h.update(struct.pack("<I", len(raw)))
        h.update(raw)
        for idx in indices:
            h.update(struct.pack("<q", int(idx)))
        return int.from_bytes(h.digest(), "little")

    def substream(self, label: str, *indices: int) -> np.random.Generator:
        """Fresh generator for the named substream.

        Every call returns a new generator positioned at the start of the
        stream, so repeated calls with the same arguments replay the same
        values.
        """
        return np.random.Generator(
            np.random.Philox(key=self.substream_key(label, *indices))
        )
