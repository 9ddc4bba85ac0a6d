"""Counter-based random substreams.

All randomness in the package is derived from a :class:`SubstreamKey`: a run
seed plus a tuple of integer path components (purpose tag, iteration index,
...).  Each key deterministically identifies one Philox generator, so a draw
depends only on its key, never on how many draws happened elsewhere.  This is
what makes sampler runs bit-identical across evaluation orders, chunk sizes
and thread counts.

Per-particle noise is organized as one keyed draw per iteration: the buffer
returned by ``key.child(tag, k).normal((P, M, d))`` is generated in a single
call and row ``i`` of it is the i-th particle's substream for that iteration.
"""

from __future__ import annotations

import numpy as np

# Purpose tags for the first path component under a run seed.
TAG_INIT = 0
TAG_XI = 1
TAG_SCORE = 2
TAG_MODEL = 3


class SubstreamKey:
    """Immutable key identifying an independent random substream."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)

    def child(self, *indices: int) -> "SubstreamKey":
        return SubstreamKey(self.seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        """A fresh Philox generator for this key (same key, same stream)."""
        seq = np.random.SeedSequence([self.seed, *self.path])
        return np.random.Generator(np.random.Philox(seq))

    def normal(self, shape) -> np.ndarray:
        """One-shot standard-normal draw for this key."""
        return self.generator().standard_normal(shape)

    def __repr__(self):  # pragma: no cover
        return f"SubstreamKey(seed={self.seed}, path={self.path})"
