"""Exact identities and monotonicity statements of the linear discrete scheme as checks.

Every check returns an :class:`IdentityReport`.  One-step decrements are
compared with Monte Carlo averages over fresh noise, path statements with
replica averages, and exact algebraic facts with fixed tolerances.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .ensemble import Ensemble, affine_span_residual, covariances, range_projector
from .noise import particle_stream
from .schemes import Trajectory, advance, cho_solve, gain, taming_matrix

EQ, LE, GE = "eq", "le", "ge"


class PreconditionError(ValueError):
    """Raised when a check's hypotheses do not hold for the supplied data."""


@dataclass
class IdentityReport:
    """``eq``: |analytic - empirical| <= tolerance.  ``le``/``ge``: one-sided with slack ``tolerance``."""

    name: str
    analytic_value: float
    empirical_value: float
    tolerance: float
    passed: bool
    sample_size: int
    relation: str = EQ
    detail: str = ""

    @classmethod
    def make(cls, name, analytic, empirical, tol, n, relation=EQ, detail="", passed=None):
        analytic, empirical, tol = float(analytic), float(empirical), float(tol)
        if passed is None:
            if relation == EQ:
                passed = abs(analytic - empirical) <= tol
            elif relation == LE:
                passed = empirical <= analytic + tol
            else:
                passed = empirical >= analytic - tol
        return cls(name, analytic, empirical, tol, bool(passed), int(n), relation, detail)

    def to_dict(self) -> dict:
        return asdict(self)


def _particles(ens) -> np.ndarray:
    return ens.particles if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)


def linear_gain(U: np.ndarray, B: np.ndarray, h: float):
    """(C, M B, C B^T M) for a whitened linear operator, batched over leading axes."""
    C, _, _ = covariances(U, U @ B.T)
    S = taming_matrix(B @ C @ B.T, h)
    L = np.linalg.cholesky(S)
    MB = cho_solve(L, np.broadcast_to(B, S.shape[:-2] + B.shape))
    CBtM = np.swapaxes(cho_solve(L, B @ C), -1, -2)
    return C, MB, CBtM


def taming_residual(U: np.ndarray, B: np.ndarray, h: float) -> float:
    C, _, _ = covariances(U, U @ B.T)
    S = taming_matrix(B @ C @ B.T, h)
    M = cho_solve(np.linalg.cholesky(S), np.eye(S.shape[-1]))
    return float(np.max(np.abs(M @ S - np.eye(S.shape[-1]))))


def check_taming_identity(ens, B, h: float, tol: float = 1e-12) -> IdentityReport:
    """M (h B C B^T + I) = I with M obtained from the Cholesky factor."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    res = taming_residual(_particles(ens), B, h)
    return IdentityReport.make("taming_identity", 0.0, res, tol, 1)


def check_orthogonality(ens, B, h: float, y_tilde, tol: float = 1e-10) -> IdentityReport:
    """C B^T M y~ = 0 whenever y~ is orthogonal to range(B)."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    y_tilde = np.asarray(y_tilde, dtype=float).reshape(-1)
    scale = 1.0 + np.linalg.norm(y_tilde)
    leak = np.linalg.norm(B.T @ y_tilde)
    if leak > 1e-10 * scale * max(1.0, np.linalg.norm(B, 2)):
        raise PreconditionError(f"y_tilde is not orthogonal to range(B) (|B^T y~| = {leak:.3e})")
    _, _, CBtM = linear_gain(_particles(ens), B, h)
    val = np.linalg.norm(CBtM @ y_tilde)
    return IdentityReport.make("orthogonality", 0.0, val, tol * scale, 1)


def spread_decrement(ens, B, h: float) -> float:
    """-h^2 (1/J) sum |C B^T M B e_j|^2 - (J+1)/J h |C B^T M|_HS^2."""
    U = _particles(ens)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    J = U.shape[0]
    E = U - U.mean(axis=0)
    _, _, CBtM = linear_gain(U, B, h)
    drift = E @ (CBtM @ B).T
    return float(-h * h * np.sum(drift * drift) / J - (J + 1) / J * h * np.sum(CBtM * CBtM))


def residual_decrement(ens, B, h: float, u_hat) -> float:
    """Four-term expected change of (1/J) sum (|B r_j|^2 + |B e_j|^2), r_j = u_j - u_hat."""
    U = _particles(ens)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    J = U.shape[0]
    E = U - U.mean(axis=0)
    Rr = U - np.asarray(u_hat, dtype=float)
    C, MB, _ = linear_gain(U, B, h)
    vr = Rr @ MB.T @ B              # rows: B^T M B r_j
    ve = E @ MB.T @ B
    t1 = np.sum((vr @ (B @ C).T) ** 2) / J
    t2 = np.einsum("ji,ik,jk->", vr, C, vr) / J
    t3 = np.sum((ve @ (B @ C).T) ** 2) / J
    t4 = np.einsum("ji,ik,jk->", ve, C, ve) / J ** 2
    return float(-h * h * t1 - 2 * h * t2 - h * h * t3 - h * t4)


def _mc_steps(U, B, h, n, seed, chunk=100_000):
    """Batches of one tamed step from ``U`` with zero data and fresh noise, shape (m, J, p)."""
    J = U.shape[0]
    Gw = U @ B.T
    D = gain(U, Gw, h, tamed=True)
    rng = particle_stream(seed, 0)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        dW = np.sqrt(h) * rng.standard_normal((m, J, B.shape[0]))
        yield advance(U, D, Gw, h, dW)
        done += m


def _mc_compare(name, analytic, samples, n_se, detail=""):
    samples = np.asarray(samples)
    n = samples.size
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    tol = n_se * se + 1e-12 * (1.0 + abs(analytic))
    if analytic > 1e-12:
        return IdentityReport.make(name, analytic, mean, tol, n, detail="analytic decrement is positive",
                                   passed=False)
    return IdentityReport.make(name, analytic, mean, tol, n, detail=detail or f"se={se:.3e}")


def check_spread_decrement(ens, B, h: float, N_mc: int = 100_000, seed: int = 0,
                           n_se: float = 4.0) -> IdentityReport:
    """Monte Carlo mean of the one-step change in spread energy against the analytic decrement."""
    U = _particles(ens)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    a = spread_decrement(U, B, h)
    before = np.sum((U - U.mean(axis=0)) ** 2) / U.shape[0]
    deltas = []
    for Un in _mc_steps(U, B, h, N_mc, seed):
        En = Un - Un.mean(axis=-2, keepdims=True)
        deltas.append(np.sum(En * En, axis=(-2, -1)) / U.shape[0] - before)
    return _mc_compare("spread_decrement", a, np.concatenate(deltas), n_se)


def residual_energy(states: np.ndarray, B, u_hat) -> np.ndarray:
    """(1/J) sum_j (|B r_j|^2 + |B e_j|^2) for batched particle arrays."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    J = states.shape[-2]
    E = states - states.mean(axis=-2, keepdims=True)
    BR = (states - np.asarray(u_hat)) @ B.T
    BE = E @ B.T
    return (np.sum(BR * BR, axis=(-2, -1)) + np.sum(BE * BE, axis=(-2, -1))) / J


def check_residual_decrement(ens, B, h: float, u_hat, N_mc: int = 100_000, seed: int = 0,
                             n_se: float = 4.0) -> IdentityReport:
    """Monte Carlo one-step change of the mapped residual-plus-spread energy.

    The step uses the observation B u_hat; the component of the data outside
    range(B) never enters the update.
    """
    U = _particles(ens)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    u_hat = np.asarray(u_hat, dtype=float)
    a = residual_decrement(U, B, h, u_hat)
    before = residual_energy(U, B, u_hat)
    # shifting by u_hat turns the data B u_hat into zero data
    deltas = [residual_energy(Rn + u_hat, B, u_hat) - before
              for Rn in _mc_steps(U - u_hat, B, h, N_mc, seed)]
    return _mc_compare("residual_decrement", a, np.concatenate(deltas), n_se)


def _running_sum_terms(states: np.ndarray, B: np.ndarray, h: float, u_hat: np.ndarray):
    """Per step and replica: |C B^T M|_HS^2 and (1/J) sum |C^{1/2} B^T M B r_j|^2."""
    J = states.shape[-2]
    C, MB, CBtM = linear_gain(states, B, h)
    hs = np.sum(CBtM * CBtM, axis=(-2, -1))
    V = (states - u_hat) @ np.swapaxes(B.T @ MB, -1, -2)      # rows B^T M B r_j
    q = np.einsum("...ji,...ik,...jk->...", V, C, V) / J
    return hs, q


def sum_bound_margins(trajectory: Trajectory, B=None, u_hat=None) -> dict:
    """Per step and replica, bound minus running sum for both inequalities.

    Returns ``{name: (margin (n, R), bound (R,))}``; replicas from separate
    runs can be concatenated along axis 1 before calling ``sum_bound_reports``.
    """
    prob = trajectory.problem
    B = prob.whitened_operator if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    if B is None:
        raise PreconditionError("sum bounds need a linear forward model")
    if u_hat is None:
        from .model import decompose_observation
        u_hat = decompose_observation(B, prob.whitened_observation)[2]
    u_hat = np.asarray(u_hat, dtype=float)
    h = trajectory.h
    X = trajectory.states
    if not np.all(np.isfinite(X)):
        raise PreconditionError("trajectory contains non-finite states")
    X = X.reshape(X.shape[0], -1, *X.shape[-2:])      # (n+1, R, J, p)
    J = X.shape[-2]
    hs, q = _running_sum_terms(X[:-1], B, h, u_hat)   # (n, R)
    E0 = X[0] - X[0].mean(axis=-2, keepdims=True)
    bound1 = np.sum(E0 * E0, axis=(-2, -1)) / J
    bound2 = residual_energy(X[0], B, u_hat) / 2.0
    lhs1 = (J + 1) / J * h * np.cumsum(hs, axis=0)
    lhs2 = h * np.cumsum(q, axis=0)
    return {"sum_bound_hs": (bound1[None, :] - lhs1, bound1),
            "sum_bound_residual": (bound2[None, :] - lhs2, bound2)}


def sum_bound_reports(margins: dict, n_se: float = 2.0) -> list:
    reports = []
    for name, (margin, bound) in margins.items():
        R = margin.shape[1]
        m = margin.mean(axis=1)
        se = margin.std(axis=1, ddof=1) / np.sqrt(R) if R > 1 else np.zeros_like(m)
        slack = m - n_se * se
        k = int(np.argmin(slack))
        ok = bool(np.all(slack >= -1e-12 * (1.0 + np.abs(bound.mean()))))
        reports.append(IdentityReport.make(
            name, float(bound.mean()), float(bound.mean() - m[k]), float(n_se * se[k]), R, LE,
            detail=f"tightest step {k + 1}, margin {m[k]:.4e}", passed=ok))
    return reports


def check_sum_bounds(trajectory: Trajectory, B=None, u_hat=None, n_se: float = 2.0):
    """Both running-sum inequalities at every step, averaged over replicas.

    Each report passes when bound - running sum exceeds ``n_se`` standard
    errors at every step.
    """
    return sum_bound_reports(sum_bound_margins(trajectory, B, u_hat), n_se)


def _initial_deviation_check(X0: np.ndarray, Q: np.ndarray, tol: float):
    E0 = X0 - X0.mean(axis=-2, keepdims=True)
    off = float(np.max(np.linalg.norm(E0 @ Q.T, axis=-1)))
    if off > tol:
        raise PreconditionError(
            f"initial deviations leave ker(B)^perp by {off:.3e}; project the initial ensemble onto range(B^T)")


def check_kernel_invariance(trajectory: Trajectory, B=None, tol: float = 1e-9) -> IdentityReport:
    """(I - P) e_n = 0 and (I - P) r_n = (I - P) r_0 along the whole trajectory."""
    B = trajectory.problem.whitened_operator if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    if B is None:
        raise PreconditionError("kernel invariance needs a linear forward model")
    X = trajectory.states
    Q = np.eye(B.shape[1]) - range_projector(B)
    _initial_deviation_check(X[0], Q, tol)
    E = X - X.mean(axis=-2, keepdims=True)
    dev_e = np.linalg.norm(E @ Q.T, axis=-1)
    dev_r = np.linalg.norm((X - X[0]) @ Q.T, axis=-1)
    worst = float(max(np.nanmax(dev_e), np.nanmax(dev_r)))
    return IdentityReport.make("kernel_invariance", 0.0, worst, tol, X.shape[0])


def check_quadform_nonneg(Z, S, rel_tol: float = 1e-12) -> IdentityReport:
    """sum_{k,l} <z_k, z_l> <z_k, S z_l> >= 0 for symmetric non-negative S."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0, atol=1e-12 * (1 + np.abs(S).max())):
        raise PreconditionError("S must be symmetric")
    val = float(np.sum((Z @ Z.T) * (Z @ S @ Z.T)))
    scale = np.sum(Z * Z) ** 2 * max(np.linalg.norm(S, 2), 1e-300)
    return IdentityReport.make("quadform_nonneg", 0.0, val, rel_tol * scale, Z.shape[0], GE)


def check_subspace(trajectory: Trajectory, tol: float = 1e-10) -> IdentityReport:
    """Every state stays in the affine span of the initial ensemble."""
    X = trajectory.states
    flat = X.reshape(X.shape[0], -1, *X.shape[-2:])
    worst = 0.0
    for r in range(flat.shape[1]):
        init = Ensemble(flat[0, r])
        for Xn in flat[1:, r]:
            if not np.all(np.isfinite(Xn)):
                break
            worst = max(worst, affine_span_residual(Ensemble(Xn), init))
    return IdentityReport.make("subspace", 0.0, worst, tol, X.shape[0])


def check_monotone_trend(series: np.ndarray, name: str, n_se: float = 2.0) -> IdentityReport:
    """Replica-averaged series (steps, replicas) non-increasing up to ``n_se`` paired SEs per step."""
    series = np.asarray(series, dtype=float)
    d = np.diff(series, axis=0)
    R = series.shape[1]
    m = d.mean(axis=1)
    se = d.std(axis=1, ddof=1) / np.sqrt(R) if R > 1 else np.zeros_like(m)
    excess = m - n_se * se
    k = int(np.argmax(excess))
    ok = bool(np.all(excess <= 1e-12 * (1.0 + np.abs(series[0]).mean())))
    return IdentityReport.make(name, 0.0, float(m[k]), float(n_se * se[k]), R, LE,
                               detail=f"largest step increase at step {k + 1}", passed=ok)


def spread_series(trajectory: Trajectory) -> np.ndarray:
    X = trajectory.states
    X = X.reshape(X.shape[0], -1, *X.shape[-2:])
    E = X - X.mean(axis=-2, keepdims=True)
    return np.sum(E * E, axis=(-2, -1)) / X.shape[-2]


def residual_series(trajectory: Trajectory, u_hat: Optional[np.ndarray] = None) -> np.ndarray:
    prob = trajectory.problem
    B = prob.whitened_operator
    if u_hat is None:
        from .model import decompose_observation
        u_hat = decompose_observation(B, prob.whitened_observation)[2]
    X = trajectory.states
    X = X.reshape(X.shape[0], -1, *X.shape[-2:])
    return residual_energy(X, B, u_hat)
