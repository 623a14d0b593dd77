"""Keyed random streams.

Every random draw in a run comes from a stream keyed by
``(root seed, round, worker, slot)``.  Streams are Philox counter-based
generators: the root seed is the cipher key and the path occupies the upper
three words of the 256-bit counter, so distinct paths start 2**64 blocks
apart and never overlap. The same key always yields the same stream,
whatever order the workers are processed in.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Lazily materialized random stream.

    The generator is only built on first access, which keeps noiseless,
    uncompressed runs from paying for seeding they never use.
    """

    root: int
    path: tuple

    def __post_init__(self):
        if not 0 <= self.root < 2**128:
            raise ValueError(f"root seed must be in [0, 2**128), got {self.root}")
        if len(self.path) > 3 or any(not 0 <= p < 2**64 for p in self.path):
            raise ValueError(f"stream path must be up to three words in [0, 2**64), got {self.path}")

    @cached_property
    def generator(self):
        words = list(self.path) + [0] * (3 - len(self.path))
        counter = np.array([0] + words, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=self.root))


def substream(root, round_index, worker, slot):
    return RngStream(int(root), (int(round_index), int(worker), int(slot)))


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
