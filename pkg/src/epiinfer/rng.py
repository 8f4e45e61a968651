"""Deterministic, replicate-addressable random number generation.

Every stochastic routine in the package takes a seed and derives a
counter-based Philox stream from it, so that (root seed, replicate,
stream) triples identify independent streams and replicate fan-out can
run in any order (or in parallel) with identical results.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SeedSpec:
    """Address of one random stream: a 64-bit root and a replicate index."""

    root: int
    replicate: int = 0

    def rng(self, stream: int = 0) -> np.random.Generator:
        return make_rng(self.root, self.replicate, stream)


def make_rng(root, replicate: int = 0, stream: int = 0) -> np.random.Generator:
    """Independent generator for (root, replicate, stream).

    Philox is counter-based: distinct keys give statistically independent
    streams, and the mapping is pure, so replicates are reproducible
    regardless of scheduling.
    """
    if isinstance(root, np.random.Generator):
        # Allow passing a generator through unchanged (internal reuse).
        return root
    if isinstance(root, SeedSpec):
        root, replicate = root.root, root.replicate
    elif isinstance(root, tuple):
        # (root, replicate[, stream]) shorthand
        parts = tuple(int(v) for v in root)
        root = parts[0]
        replicate = parts[1] if len(parts) > 1 else replicate
        stream = parts[2] if len(parts) > 2 else stream
    root = int(root)
    if root < 0:
        raise ValueError("root seed must be a nonnegative integer")
    seq = np.random.SeedSequence(entropy=root, spawn_key=(int(replicate), int(stream)))
    return np.random.Generator(np.random.Philox(seq))
