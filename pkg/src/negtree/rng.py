"""Deterministic random-number streams.

All sampling in the package draws from counter-based Philox generators keyed
by a hash of (seed, path). Distinct paths give independent streams, so
parallel chains and sub-runs stay reproducible regardless of scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "UniformStream"]


def _derive_key(seed: int, path: tuple) -> np.ndarray:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    digest = h.digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def stream(seed: int, *path) -> np.random.Generator:
    """Independent Generator for (seed, *path); same inputs, same stream."""
    return np.random.Generator(np.random.Philox(key=_derive_key(seed, path)))


class UniformStream:
    """Buffered stream of uniform[0,1) doubles drawn from a Generator.

    Both the compiled and the pure-Python walk kernels consume uniforms one
    at a time from the same buffer, which keeps their trajectories
    bit-identical under a fixed seed.
    """

    BLOCK = 4096

    def __init__(self, gen: np.random.Generator):
        self._gen = gen
        self.buf = np.empty(self.BLOCK, dtype=np.float64)
        self.pos = np.array([self.BLOCK], dtype=np.int64)  # exhausted

    def refill(self):
        self._gen.random(out=self.buf)
        self.pos[0] = 0

    def next(self) -> float:
        if self.pos[0] >= self.BLOCK:
            self.refill()
        u = self.buf[self.pos[0]]
        self.pos[0] += 1
        return float(u)
