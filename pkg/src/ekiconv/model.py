"""Forward models, noise whitening and the Tikhonov extension of a linear problem."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

LINEAR = "linear"
LIPSCHITZ = "lipschitz-nonlinear"
POLYNOMIAL = "polynomial-nonlinear"
_KINDS = (LINEAR, LIPSCHITZ, POLYNOMIAL)

# relative singular value cutoff factor shared by every rank decision
RANK_RTOL = 1e-12


def rank_cutoff(s: np.ndarray, shape: tuple[int, int]) -> float:
    """Singular value threshold sigma_max * max(shape) * 1e-12."""
    if s.size == 0:
        return 0.0
    return float(s.max()) * max(shape) * RANK_RTOL


def sym_sqrt(S: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) of an SPD matrix via eigh."""
    S = np.asarray(S, dtype=float)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if np.any(w <= 0):
        raise ValueError("matrix is not positive definite")
    d = w ** (-0.5) if inverse else np.sqrt(w)
    R = (V * d) @ V.T
    return 0.5 * (R + R.T)


@dataclass(frozen=True)
class ForwardModel:
    """Forward map G: R^p -> R^K.

    ``eval`` must accept arrays of shape ``(..., p)`` and return ``(..., K)``.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    p: int
    K: int
    kind: str = LINEAR
    growth_exponent: float = 1.0
    linear_matrix: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.growth_exponent < 1:
            raise ValueError("growth exponent must be >= 1")
        if self.kind == LIPSCHITZ and self.growth_exponent != 1:
            raise ValueError("lipschitz-nonlinear models have growth exponent 1")
        if self.linear_matrix is not None:
            A = np.array(self.linear_matrix, dtype=float)
            if A.shape != (self.K, self.p):
                raise ValueError(f"linear matrix has shape {A.shape}, expected {(self.K, self.p)}")
            A.setflags(write=False)
            object.__setattr__(self, "linear_matrix", A)
        elif self.kind == LINEAR:
            raise ValueError("linear models need a linear_matrix")

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.eval(u)

    @property
    def is_linear(self) -> bool:
        return self.kind == LINEAR

    @classmethod
    def linear(cls, A) -> "ForwardModel":
        A = np.array(A, dtype=float)
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        A.setflags(write=False)
        return cls(eval=lambda u: u @ A.T, p=A.shape[1], K=A.shape[0],
                   kind=LINEAR, growth_exponent=1.0, linear_matrix=A, name="linear")

    @classmethod
    def lipschitz_tanh(cls, mix) -> "ForwardModel":
        """G(u) = mix @ tanh(u): globally Lipschitz and bounded."""
        W = np.array(mix, dtype=float)
        W.setflags(write=False)
        return cls(eval=lambda u: np.tanh(u) @ W.T, p=W.shape[1], K=W.shape[0],
                   kind=LIPSCHITZ, growth_exponent=1.0, name="lipschitz_tanh")

    @classmethod
    def cubic(cls, p: int, scale: float = 1.0) -> "ForwardModel":
        """Coordinatewise G(u) = scale * u**3 (K = p, growth exponent 3)."""
        return cls(eval=lambda u: scale * np.asarray(u) ** 3, p=p, K=p,
                   kind=POLYNOMIAL, growth_exponent=3.0, name="cubic")


@dataclass(frozen=True)
class InverseProblem:
    """y = G(u) + eta with eta ~ N(0, gamma)."""

    model: ForwardModel
    gamma: np.ndarray
    observation: np.ndarray
    gamma_inv_sqrt: np.ndarray = field(init=False, repr=False)
    gamma_sqrt: np.ndarray = field(init=False, repr=False)
    whitened_operator: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        K = self.model.K
        gamma = np.array(self.gamma, dtype=float)
        if gamma.ndim == 0:
            gamma = float(gamma) * np.eye(K)
        y = np.array(self.observation, dtype=float).reshape(-1)
        if gamma.shape != (K, K):
            raise ValueError(f"gamma has shape {gamma.shape}, expected {(K, K)}")
        if y.shape != (K,):
            raise ValueError(f"observation has shape {y.shape}, expected {(K,)}")
        if not np.allclose(gamma, gamma.T, rtol=0, atol=1e-12 * np.abs(gamma).max()):
            raise ValueError("gamma must be symmetric")
        np.linalg.cholesky(gamma)  # raises LinAlgError unless SPD
        gis = sym_sqrt(gamma, inverse=True)
        gs = sym_sqrt(gamma)
        B = None if self.model.linear_matrix is None else gis @ self.model.linear_matrix
        for name, val in (("gamma", gamma), ("observation", y), ("gamma_inv_sqrt", gis),
                          ("gamma_sqrt", gs), ("whitened_operator", B)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def p(self) -> int:
        return self.model.p

    @property
    def K(self) -> int:
        return self.model.K

    @property
    def whitened_observation(self) -> np.ndarray:
        return self.gamma_inv_sqrt @ self.observation

    def whitened_outputs(self, u: np.ndarray) -> np.ndarray:
        """Gamma^{-1/2} G(u) for u of shape (..., p)."""
        return self.model(u) @ self.gamma_inv_sqrt


def decompose_observation(B, z):
    """Split ``z`` into its component in range(B) and the orthogonal remainder.

    Returns ``(y_hat, y_tilde, u_hat)`` where ``u_hat`` is the minimum-norm
    solution of ``B u_hat = y_hat``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    z = np.asarray(z, dtype=float).reshape(-1)
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    r = int(np.sum(s > rank_cutoff(s, B.shape))) if s.size and s.max() > 0 else 0
    Ur, sr, Vr = U[:, :r], s[:r], Vt[:r].T
    coeff = Ur.T @ z
    y_hat = Ur @ coeff
    y_tilde = z - y_hat
    u_hat = Vr @ (coeff / sr)
    return y_hat, y_tilde, u_hat


def extend_tikhonov(problem: InverseProblem, lam: float, C0=None) -> InverseProblem:
    """Stack the prior block: A~ = [A; I], y~ = (y; 0), Gamma~ = diag(Gamma, C0 / lam)."""
    if not problem.model.is_linear:
        raise ValueError("Tikhonov extension is only defined here for linear forward models")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    p, K = problem.p, problem.K
    C0 = np.eye(p) if C0 is None else np.array(C0, dtype=float)
    if C0.shape != (p, p):
        raise ValueError(f"C0 has shape {C0.shape}, expected {(p, p)}")
    A_ext = np.vstack([problem.model.linear_matrix, np.eye(p)])
    gamma_ext = np.zeros((K + p, K + p))
    gamma_ext[:K, :K] = problem.gamma
    gamma_ext[K:, K:] = C0 / lam
    y_ext = np.concatenate([problem.observation, np.zeros(p)])
    return InverseProblem(ForwardModel.linear(A_ext), gamma_ext, y_ext)


@dataclass(frozen=True)
class GrowthDiagnostics:
    B_R: float
    L_R: float
    C_a: float
    K: float
    delta: float


def growth_diagnostics(m: float, R: float, h: float, c: float, eps: float,
                       scale: float = 1.0) -> GrowthDiagnostics:
    """Local growth, Lipschitz and approximation constants for polynomial G of degree m."""
    if not R > 0:
        raise ValueError("R must be positive")
    if not 0 < h < 1:
        raise ValueError("h must lie in (0, 1)")
    if m < 1:
        raise ValueError("m must be >= 1")
    B_R = scale * (R ** (1 + 2 * m) + 1)
    L_R = scale * (R ** (2 * m) + 1)
    C_a = scale * h * (R ** (4 * m + 1) + 1)
    K = C_a + L_R * np.sqrt(h) * B_R
    delta = 2 * L_R + c * L_R ** 2 + eps
    return GrowthDiagnostics(B_R=B_R, L_R=L_R, C_a=C_a, K=K, delta=delta)
