"""One-step maps, trajectory simulation and continuous-time interpolation.

All kernels act on particle arrays of shape ``(..., J, p)``; leading axes are
independent replicas (or, for interpolation, time nodes) and are never mixed.
In whitened variables a step reads

    u_j <- u_j + D (dW_j - h (Gamma^{-1/2} G(u_j) - Gamma^{-1/2} y))

with gain ``D = C_up_w (h C_pp_w + I)^{-1}`` for the tamed scheme and
``D = C_up_w`` for Euler-Maruyama, where ``C_up_w = C_up Gamma^{-1/2}`` and
``C_pp_w = Gamma^{-1/2} C_pp Gamma^{-1/2}``.  For a linear model this is
``D = C B^T M`` with ``M = (h B C B^T + I)^{-1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .ensemble import Ensemble, covariances
from .model import InverseProblem, extend_tikhonov
from .noise import NoiseLattice, increments_at_level

TAMED = "tamed"
EM = "em"
TEKI = "teki"
VARIANTS = (TAMED, EM, TEKI)

CSV_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SchemeConfig:
    variant: str = TAMED
    level: int = 0
    T: float = 1.0
    explosion_threshold: float = 1e8
    lam: Optional[float] = None
    C0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown scheme variant {self.variant!r}")
        if self.level < 0:
            raise ValueError("level must be non-negative")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.variant == TEKI and not (self.lam is not None and self.lam > 0):
            raise ValueError("TEKI needs a positive lambda")

    @property
    def h(self) -> float:
        return self.T / 2 ** self.level

    @property
    def steps(self) -> int:
        return 2 ** self.level

    @property
    def tamed(self) -> bool:
        return self.variant != EM

    def effective_problem(self, problem: InverseProblem) -> InverseProblem:
        """The problem the step acts on (the Tikhonov extension for TEKI)."""
        if self.variant == TEKI:
            return extend_tikhonov(problem, self.lam, self.C0)
        return problem


def cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) X = B`` for batched lower-triangular ``L`` (..., n, n)."""
    n = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:]
    Y = np.empty(shape)
    B = np.broadcast_to(B, shape)
    for i in range(n):
        acc = B[..., i, :]
        if i:
            acc = acc - np.sum(L[..., i, :i, None] * Y[..., :i, :], axis=-2)
        Y[..., i, :] = acc / L[..., i, i, None]
    X = np.empty(shape)
    for i in range(n - 1, -1, -1):
        acc = Y[..., i, :]
        if i < n - 1:
            acc = acc - np.sum(L[..., i + 1:, i, None] * X[..., i + 1:, :], axis=-2)
        X[..., i, :] = acc / L[..., i, i, None]
    return X


def taming_matrix(C_pp_w: np.ndarray, h: float) -> np.ndarray:
    """S = h C_pp_w + I, whose inverse is the taming factor M."""
    K = C_pp_w.shape[-1]
    return h * C_pp_w + np.eye(K)


def gain(U: np.ndarray, Gw: np.ndarray, h: float, tamed: bool = True) -> np.ndarray:
    """Kalman-type gain D of shape (..., p, K) from particles and whitened outputs."""
    _, C_up, C_pp = covariances(U, Gw)
    if not tamed:
        return C_up
    S = taming_matrix(C_pp, h)
    Ct = np.swapaxes(C_up, -1, -2)
    try:
        Dt = cho_solve(np.linalg.cholesky(S), Ct)
    except np.linalg.LinAlgError:
        # only reachable when roundoff destroys definiteness at astronomically large spreads
        Dt = np.linalg.solve(S, Ct)
    return np.swapaxes(Dt, -1, -2)


def step_coefficients(U: np.ndarray, problem: InverseProblem, h: float, tamed: bool = True):
    """Gain D (..., p, K) and whitened misfits R (..., J, K) frozen over one cell."""
    Gw = problem.whitened_outputs(U)
    D = gain(U, Gw, h, tamed)
    R = Gw - problem.whitened_observation
    return D, R


def advance(U: np.ndarray, D: np.ndarray, R: np.ndarray, dt: float, dW: np.ndarray) -> np.ndarray:
    return U + (dW - dt * R) @ np.swapaxes(D, -1, -2)


def _as_array(ens) -> np.ndarray:
    U = ens.particles if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    if not np.all(np.isfinite(U)):
        raise ValueError("non-finite ensemble")
    return U


def _check_noise(U, dW, K):
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-1] != K or dW.shape[-2] != U.shape[-2]:
        raise ValueError(f"noise has shape {dW.shape}, expected (..., {U.shape[-2]}, {K})")
    return dW


def _step(ens, prob, h, dW, tamed):
    U = _as_array(ens)
    if U.shape[-1] != prob.p:
        raise ValueError(f"particles have dimension {U.shape[-1]}, problem expects {prob.p}")
    dW = _check_noise(U, dW, prob.K)
    D, R = step_coefficients(U, prob, h, tamed)
    out = advance(U, D, R, h, dW)
    return Ensemble(out) if isinstance(ens, Ensemble) else out


def step_tamed(ens, prob: InverseProblem, h: float, dW):
    """One discrete EKI step; ``dW`` holds N(0, h I_K) increments, one row per particle."""
    return _step(ens, prob, h, dW, tamed=True)


def step_em(ens, prob: InverseProblem, h: float, dW):
    """Euler-Maruyama comparator: the tamed step with Gamma^{-1} in place of (h C_pp + Gamma)^{-1}."""
    return _step(ens, prob, h, dW, tamed=False)


def step_teki(ens, extended_prob: InverseProblem, h: float, dW_extended):
    """TEKI step: the tamed step on the Tikhonov-extended problem (noise in R^{K+p})."""
    if extended_prob.K <= extended_prob.p:
        raise ValueError("expected an extended problem with K + p outputs")
    return _step(ens, extended_prob, h, dW_extended, tamed=True)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ensembles on the grid of one level; ``states`` has shape (n + 1, *batch, J, p).

    For a single replica ``states`` stops at the last admissible state when the
    path explodes.  Batched trajectories keep their full length and fill
    exploded replicas with NaN from the explosion onwards.
    """

    config: SchemeConfig
    problem: InverseProblem
    states: np.ndarray
    exploded_at: Union[None, float, np.ndarray]
    seed: Union[None, int, tuple] = None

    @property
    def level(self) -> int:
        return self.config.level

    @property
    def h(self) -> float:
        return self.config.h

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.h

    @property
    def batch_shape(self) -> tuple:
        return self.states.shape[1:-2]

    @property
    def ensembles(self) -> list:
        if self.batch_shape:
            raise ValueError("batched trajectory; index a replica first")
        return [Ensemble(s) for s in self.states]

    @property
    def exploded(self):
        if self.batch_shape:
            return np.isfinite(self.exploded_at)
        return self.exploded_at is not None

    def replica(self, i: int) -> "Trajectory":
        if not self.batch_shape:
            raise ValueError("trajectory has no replica axis")
        t = self.exploded_at[i]
        states = self.states[:, i]
        seed = None if self.seed is None else self.seed[i]
        if np.isfinite(t):
            states = states[: int(round(t / self.h))]
            return Trajectory(self.config, self.problem, states, float(t), seed)
        return Trajectory(self.config, self.problem, states, None, seed)

    def to_csv(self, path) -> None:
        if self.batch_shape:
            raise ValueError("export a single replica")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            p = self.states.shape[-1]
            w.writerow(["schema_version", "t", "particle"] + [f"coord_{i}" for i in range(p)])
            for t, U in zip(self.times, self.states):
                for j, u in enumerate(U):
                    w.writerow([CSV_SCHEMA_VERSION, repr(float(t)), j] + [repr(float(x)) for x in u])


def run_scheme(U0: np.ndarray, problem: InverseProblem, h: float, dW: np.ndarray,
               tamed: bool = True, threshold: float = 1e8):
    """Iterate the step over the increments ``dW`` (n, *batch, J, K).

    Returns the full state array and the explosion times (NaN where none).
    Exploded replicas are frozen and stored as NaN from the breaching step on.
    """
    n = dW.shape[0]
    batch = U0.shape[:-2]
    states = np.empty((n + 1,) + U0.shape)
    states[0] = U0
    exploded_at = np.full(batch, np.nan)
    alive = np.ones(batch, dtype=bool)
    U = U0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            D, R = step_coefficients(U, problem, h, tamed)
            new = advance(U, D, R, h, dW[k])
            norms = np.sqrt(np.sum(new * new, axis=-1))
            bad = ~np.all(np.isfinite(new), axis=(-2, -1)) | np.any(norms > threshold, axis=-1)
            fresh = bad & alive
            if np.any(fresh):
                exploded_at = np.where(fresh, (k + 1) * h, exploded_at)
                alive = alive & ~bad
            if np.all(alive):
                states[k + 1] = U = new
                continue
            if not np.any(alive):
                states[k + 1:] = np.nan
                break
            keep = alive[..., None, None]
            states[k + 1] = np.where(keep, new, np.nan)
            # dead replicas continue on a harmless placeholder; their output is discarded
            U = np.where(keep, new, 0.0)
    return states, exploded_at


def simulate(config: SchemeConfig, prob: InverseProblem, initial, lattice: NoiseLattice) -> Trajectory:
    """Run the configured scheme over the dyadic grid of ``config.level``."""
    if config.level > lattice.levels:
        raise ValueError(f"level {config.level} is finer than the lattice ({lattice.levels})")
    if not np.isclose(config.T, lattice.T, rtol=1e-14, atol=0):
        raise ValueError("scheme horizon differs from lattice horizon")
    eff = config.effective_problem(prob)
    if lattice.dim != eff.K:
        raise ValueError(f"lattice noise dimension {lattice.dim} != {eff.K}")
    U0 = _as_array(initial)
    if U0.shape[:-2] != lattice.batch_shape:
        U0 = np.broadcast_to(U0, lattice.batch_shape + U0.shape[-2:]).copy()
    dW = increments_at_level(lattice, config.level)
    states, exploded_at = run_scheme(U0, eff, config.h, dW, config.tamed, config.explosion_threshold)
    if lattice.batch_shape:
        return Trajectory(config, prob, states, exploded_at, lattice.seed)
    if np.isfinite(exploded_at):
        k = int(round(float(exploded_at) / config.h))
        return Trajectory(config, prob, states[:k], float(exploded_at), lattice.seed)
    return Trajectory(config, prob, states, None, lattice.seed)


def reference_path(prob: InverseProblem, initial, lattice: NoiseLattice,
                   config: Optional[SchemeConfig] = None) -> Trajectory:
    """Tamed scheme on the finest lattice level: the stand-in for the SDE solution.

    ``config`` only contributes the Tikhonov data of a TEKI run; an
    Euler-Maruyama config still gets a tamed reference.
    """
    variant, lam, C0, thr = TAMED, None, None, 1e8
    if config is not None:
        thr = config.explosion_threshold
        if config.variant == TEKI:
            variant, lam, C0 = TEKI, config.lam, config.C0
    ref = SchemeConfig(variant, lattice.levels, lattice.T, thr, lam, C0)
    return simulate(ref, prob, initial, lattice)


def interpolate(traj: Trajectory, lattice: NoiseLattice, t: float):
    """Y(t) = Y_n + (t - t_n) f_h(Y_n) + g_h(Y_n) (W(t) - W(t_n)) with t_n the grid point below t."""
    m = lattice.node_index(t)
    s = 2 ** (lattice.levels - traj.level)
    n = m // s
    if n >= traj.states.shape[0] or (m % s and n + 1 >= traj.states.shape[0] and traj.exploded_at is not None):
        raise ValueError(f"t={t} lies beyond the end of the trajectory")
    U = traj.states[n]
    if m % s == 0:
        return Ensemble(U) if not traj.batch_shape else U
    eff = traj.config.effective_problem(traj.problem)
    D, R = step_coefficients(U, eff, traj.h, traj.config.tamed)
    dW = lattice.path[m] - lattice.path[n * s]
    Y = advance(U, D, R, (m - n * s) * lattice.h_min, dW)
    return Ensemble(Y) if not traj.batch_shape else Y


def interpolate_all(traj: Trajectory, lattice: NoiseLattice) -> np.ndarray:
    """Interpolated states at every finest node, shape (2**L + 1, *batch, J, p).

    Nodes past an explosion are NaN.
    """
    L, lvl = lattice.levels, traj.level
    N, s = 2 ** lvl, 2 ** (L - lvl)
    states = traj.states
    if states.shape[0] < N + 1:
        pad = np.full((N + 1 - states.shape[0],) + states.shape[1:], np.nan)
        states = np.concatenate([states, pad])
    out = np.empty((N * s + 1,) + states.shape[1:])
    out[-1] = states[N]
    if s == 1:
        out[:-1] = states[:N]
        return out
    U = states[:N]
    finite = np.all(np.isfinite(U), axis=(-2, -1))
    Us = np.where(finite[..., None, None], U, 0.0)
    eff = traj.config.effective_problem(traj.problem)
    D, R = step_coefficients(Us, eff, traj.h, traj.config.tamed)
    W = lattice.path
    Wn = W[0:N * s:s]                               # (N, *batch, J, K)
    dW = W[:N * s].reshape((N, s) + W.shape[1:]) - Wn[:, None]
    dt = (np.arange(s) * lattice.h_min).reshape((1, s) + (1,) * (dW.ndim - 2))
    Dt = np.swapaxes(D, -1, -2)[:, None]
    Y = Us[:, None] + (dW - dt * R[:, None]) @ Dt
    Y[:, 0] = Us                                     # grid nodes reproduce stored states exactly
    Y = np.where(finite[:, None, ..., None, None], Y, np.nan)
    out[:-1] = Y.reshape((N * s,) + Y.shape[2:])
    return out
