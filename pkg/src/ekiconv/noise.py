"""Hierarchical Brownian increments shared across step sizes.

Every particle draws from its own Philox stream keyed by ``(seed, particle)``;
the position inside the stream is the fine step index, so a lattice is a pure
function of its arguments regardless of how replicas are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

MAX_LEVEL = 26


def particle_stream(seed: int, particle: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(particle,))))


@dataclass(frozen=True, eq=False)
class NoiseLattice:
    """Finest-level increments of J independent K-dimensional Brownian motions.

    ``increments`` has shape ``(2**levels, *batch, J, K)``; the batch axes are
    empty for a single replica and hold one entry per seed otherwise.
    """

    seed: Union[int, tuple]
    T: float
    levels: int
    J: int
    dim: int
    increments: np.ndarray

    @property
    def h_min(self) -> float:
        return self.T / 2 ** self.levels

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[1:-2]

    @cached_property
    def path(self) -> np.ndarray:
        """W at every finest grid node, shape ``(2**levels + 1, *batch, J, K)``."""
        W = np.zeros((self.increments.shape[0] + 1,) + self.increments.shape[1:])
        np.cumsum(self.increments, axis=0, out=W[1:])
        W.setflags(write=False)
        return W

    def node_index(self, t: float) -> int:
        k = t / self.h_min
        kr = int(round(k))
        if abs(k - kr) > 1e-9 * max(1.0, abs(k)) or not 0 <= kr <= 2 ** self.levels:
            raise ValueError(f"t={t!r} is not a node of the finest grid on [0, {self.T}]")
        return kr

    def replica(self, i: int) -> "NoiseLattice":
        if not self.batch_shape:
            raise ValueError("lattice has no replica axis")
        return NoiseLattice(self.seed[i], self.T, self.levels, self.J, self.dim,
                            self.increments[:, i])


def build_lattice(seed: Union[int, Sequence[int]], T: float, L: int, J: int, K: int) -> NoiseLattice:
    """Draw 2**L i.i.d. N(0, (T / 2**L) I_K) increments for each of J particles.

    A sequence of seeds produces a batched lattice with one replica per seed,
    each identical to the lattice built from that seed alone.
    """
    if L > MAX_LEVEL:
        raise ValueError(f"level {L} exceeds the memory cap {MAX_LEVEL}")
    if L < 0:
        raise ValueError("level must be non-negative")
    if not T > 0:
        raise ValueError("horizon T must be positive")
    n = 2 ** L
    scale = np.sqrt(T / n)
    if np.ndim(seed) == 0:
        seeds = [int(seed)]
        single = True
    else:
        seeds = [int(s) for s in seed]
        single = False
    inc = np.empty((n, len(seeds), J, K))
    for r, s in enumerate(seeds):
        for j in range(J):
            inc[:, r, j, :] = particle_stream(s, j).standard_normal((n, K))
    inc *= scale
    if single:
        inc = inc[:, 0]
    inc.setflags(write=False)
    return NoiseLattice(seeds[0] if single else tuple(seeds), float(T), L, J, K, inc)


def increments_at_level(lattice: NoiseLattice, level: int) -> np.ndarray:
    """Block sums of 2**(L - level) consecutive finest increments."""
    if not 0 <= level <= lattice.levels:
        raise ValueError(f"level {level} outside [0, {lattice.levels}]")
    inc = lattice.increments
    if level == lattice.levels:
        return inc
    block = 2 ** (lattice.levels - level)
    return inc.reshape((2 ** level, block) + inc.shape[1:]).sum(axis=1)


def path_value(lattice: NoiseLattice, particle: int, t: float) -> np.ndarray:
    """W^(particle)(t) for t on the finest grid."""
    k = lattice.node_index(t)
    return lattice.path[k, ..., particle, :]
