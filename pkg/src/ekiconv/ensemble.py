"""Ensemble state and its empirical statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardModel, rank_cutoff


@dataclass(frozen=True)
class Ensemble:
    """J particles in R^p, stored row-wise."""

    particles: np.ndarray

    def __post_init__(self):
        X = np.array(self.particles, dtype=float)
        if X.ndim != 2:
            raise ValueError("particles must be a J x p array")
        if X.shape[0] < 2:
            raise ValueError("an ensemble needs at least two particles")
        if not np.all(np.isfinite(X)):
            raise ValueError("ensemble contains non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "particles", X)

    @property
    def J(self) -> int:
        return self.particles.shape[0]

    @property
    def p(self) -> int:
        return self.particles.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    def __len__(self) -> int:
        return self.J


@dataclass(frozen=True)
class EnsembleStats:
    u_bar: np.ndarray
    g_bar: np.ndarray
    C: np.ndarray
    C_up: np.ndarray
    C_pp: np.ndarray
    deviations: np.ndarray


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def covariances(U: np.ndarray, G: np.ndarray):
    """1/J-normalised (C, C_up, C_pp) for batched particles ``U`` (..., J, p) and outputs ``G`` (..., J, K)."""
    J = U.shape[-2]
    E = U - U.mean(axis=-2, keepdims=True)
    F = G - G.mean(axis=-2, keepdims=True)
    Et = np.swapaxes(E, -1, -2)
    C = _sym(Et @ E / J)
    C_up = Et @ F / J
    C_pp = _sym(np.swapaxes(F, -1, -2) @ F / J)
    return C, C_up, C_pp


def stats(ensemble: Ensemble, model: ForwardModel) -> EnsembleStats:
    U = ensemble.particles
    G = np.asarray(model(U), dtype=float)
    C, C_up, C_pp = covariances(U, G)
    u_bar = U.mean(axis=0)
    return EnsembleStats(u_bar=u_bar, g_bar=G.mean(axis=0), C=C, C_up=C_up,
                         C_pp=C_pp, deviations=U - u_bar)


def spread_energy(ensemble) -> float:
    """(1/J) sum_j |u_j - u_bar|^2, which equals trace C."""
    U = ensemble.particles if isinstance(ensemble, Ensemble) else np.asarray(ensemble)
    E = U - U.mean(axis=-2, keepdims=True)
    return np.sum(E * E, axis=(-2, -1)) / U.shape[-2]


def _row_space_basis(M: np.ndarray) -> np.ndarray:
    M = np.atleast_2d(M)
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s.max() == 0:
        return np.zeros((M.shape[1], 0))
    r = int(np.sum(s > rank_cutoff(s, M.shape)))
    return Vt[:r].T


def range_projector(B) -> np.ndarray:
    """Orthogonal projector onto ker(B)^perp = range(B^T)."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    V = _row_space_basis(B)
    P = V @ V.T
    return _sym(P)


def affine_span_residual(ensemble: Ensemble, initial: Ensemble) -> float:
    """Largest relative distance of a particle from the affine span of ``initial``.

    For every particle the distance of ``u_j - mean(initial)`` from
    span{initial deviations} is divided by ``1 + |u_j|``.
    """
    U = ensemble.particles
    U0 = initial.particles
    if U.shape != U0.shape:
        raise ValueError("ensembles must have the same shape")
    u0_bar = U0.mean(axis=0)
    V = _row_space_basis(U0 - u0_bar)
    D = U - u0_bar
    R = D - (D @ V) @ V.T
    return float(np.max(np.linalg.norm(R, axis=1) / (1.0 + np.linalg.norm(U, axis=1))))
