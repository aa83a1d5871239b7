"""Deterministic random-state handles shared by every randomized operation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_STREAM_MIX = 1_000_003  # prime multiplier so nested child streams stay distinct


@dataclass(frozen=True)
class RngState:
    """Reproducible random source: identical (seed, stream) gives identical draws.

    Randomized operations take an RngState and derive a fresh generator from
    it, so they stay pure functions of (inputs, state). Parallel or staged
    consumers should split with :meth:`child` instead of sharing a generator.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator; successive calls restart the stream."""
        return np.random.default_rng(np.random.SeedSequence([int(self.seed) % 2**63, int(self.stream) % 2**63]))

    def child(self, index: int) -> "RngState":
        """Derive a distinct child state; children of distinct indices never collide."""
        return RngState(self.seed, (self.stream * _STREAM_MIX + index + 1) % 2**63)

    def torch_seed(self) -> int:
        """A 63-bit seed for torch derived from this state (stable, not a draw)."""
        return int(self.generator().integers(0, 2**63 - 1))
