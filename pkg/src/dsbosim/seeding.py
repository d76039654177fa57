"""Counter-based deterministic random streams.

Every random draw in a simulation is keyed by the tuple
``(base_seed, iteration, agent, stream)``. The key construction is
stateless, so results do not depend on evaluation order or thread
scheduling: two calls with the same tuple always produce the same
generator, and distinct tuples produce distinct generators.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["Stream", "DrawKey", "derive_draw_key", "mix64"]

_MASK64 = (1 << 64) - 1


class Stream(enum.IntEnum):
    """Named, disjoint randomness streams used by the runner."""

    DIRECTIONS = 0      # per-(k, agent) master for one direction evaluation
    GRAD_F = 1          # additive noise on the upper gradient
    GRAD_G_AT_Y = 2     # additive noise on the lower gradient at (x, y)
    GRAD_G_AT_THETA = 3  # additive noise on the lower gradient at (x, theta)
    TOPOLOGY = 4        # dynamic topology regeneration
    INIT = 5            # swarm initialization
    MINIBATCH_F = 6     # mini-batch index draws for f
    MINIBATCH_G = 7     # mini-batch index draws for g


def mix64(*values: int) -> int:
    """Mix integers into one 64-bit word (splitmix64 finalizer chain)."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h + (v & _MASK64)) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = h ^ (h >> 31)
    return h


@dataclass(frozen=True)
class DrawKey:
    """Immutable handle selecting one deterministic random stream.

    The 128-bit ``key`` is derived from the base seed alone; the
    (iteration, agent, stream) triple is placed in the Philox counter,
    which makes distinct tuples map to disjoint streams by construction.
    """

    key: int
    k: int
    agent: int
    stream: int = Stream.DIRECTIONS

    def with_stream(self, stream: Stream | int) -> "DrawKey":
        return replace(self, stream=int(stream))

    def generator(self) -> np.random.Generator:
        # counter word 0 is the one Philox increments while drawing, so
        # the identifying fields live in words 1..3
        counter = [0, int(self.stream), self.agent & _MASK64, self.k & _MASK64]
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.key, self.k, self.agent, int(self.stream))


def derive_draw_key(base_seed: int, k: int, agent: int, stream: Stream | int = Stream.DIRECTIONS) -> DrawKey:
    """Map ``(base_seed, k, agent, stream)`` to a collision-free draw key."""
    key128 = mix64(base_seed) | (mix64(base_seed, 0x5EED) << 64)
    return DrawKey(key=key128, k=int(k), agent=int(agent), stream=int(stream))
