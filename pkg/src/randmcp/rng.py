"""Deterministic per-task random number streams.

Every stochastic routine in this package takes an explicit
``numpy.random.Generator``.  Simulation code derives one counter-based
stream per task from a root seed and an integer task path, so results
are bit-identical no matter how work is scheduled across workers.
"""
from __future__ import annotations

from numpy.random import Generator, Philox, SeedSequence


def substream(root_seed: int, *path: int) -> Generator:
    """Return the Philox stream addressed by ``(root_seed, *path)``.

    Streams with different paths are statistically independent; the same
    (seed, path) pair always yields the same stream regardless of which
    worker or thread consumes it.
    """
    if not isinstance(root_seed, int) or root_seed < 0:
        raise ValueError(f"root seed must be a nonnegative integer, got {root_seed!r}")
    seq = SeedSequence(entropy=root_seed, spawn_key=tuple(int(p) for p in path))
    return Generator(Philox(seq))
