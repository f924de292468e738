"""Counter-based random streams.

Each draw builds a Philox generator keyed by ``seed`` with the call counter
(and lane) placed in the high words of the Philox block counter, so the
sequence of draws is a pure function of ``(seed, lane, counter)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    seed: int
    counter: int = 0
    lane: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must fit in 64 bits")

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, self.counter & _MASK64, self.lane & _MASK64])
        self.counter += 1
        return np.random.Generator(bitgen)

    def fork(self, lane: int) -> "RngStream":
        """Independent stream for a sub-task; the parent is not advanced."""
        return RngStream(self.seed, 0, (self.lane * 1_000_003 + lane + 1) & _MASK64)

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.counter, self.lane)

    def state(self) -> tuple[int, int, int]:
        return self.seed, self.counter, self.lane

    # -- draws ----------------------------------------------------------------
    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._generator().integers(low, high, size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._generator().random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)
