"""Counter-based random streams.

A :class:`SeedStream` is a (master seed, path) pair.  The generator for a
stream is ``PCG64(SeedSequence(master, spawn_key=path))``, so any stream can be
rebuilt from its path alone: repeats and UL iterations can be evaluated in any
order, on any number of workers, and still draw identical numbers.

Path layout used by the package::

    mse sweep : (grid index, repeat, sid step)
    bsgm      : (seed index, UL iteration s, sid step)

where ``sid step`` is 1..4 for the four stages of the estimator (5 draws the
task subset for meta-learning problems).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SeedStream:
    master: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master) < 2**64:
            raise ValueError("master seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master", int(self.master))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def child(self, *index: int) -> "SeedStream":
        return SeedStream(self.master, self.path + tuple(index))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))


def split_streams(rng, n: int) -> list:
    """Turn ``rng`` into ``n`` mutually independent generators.

    Accepts a :class:`SeedStream` (children 1..n), a numpy ``Generator``
    (``spawn``), or an explicit sequence of ``n`` generator-like objects,
    which is passed through unchanged.
    """
    if isinstance(rng, SeedStream):
        return [rng.child(i + 1).generator() for i in range(n)]
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n)
    if isinstance(rng, Sequence) and len(rng) == n:
        return list(rng)
    raise TypeError(f"cannot split {type(rng).__name__} into {n} streams")


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, SeedStream):
        return rng.generator()
    if rng is None:
        raise TypeError("an explicit random stream is required")
    return rng
