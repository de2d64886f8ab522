import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ekiconv.ensemble import range_projector
from ekiconv.model import ForwardModel, InverseProblem, decompose_observation
from ekiconv.noise import build_lattice
from ekiconv.properties import (GE, LE, IdentityReport, PreconditionError, check_kernel_invariance,
                                check_monotone_trend, check_orthogonality, check_quadform_nonneg,
                                check_residual_decrement, check_spread_decrement, check_subspace,
                                check_sum_bounds, check_taming_identity, residual_decrement,
                                spread_decrement)
from ekiconv.schemes import TAMED, SchemeConfig, simulate

# -h^2 M^2 - (3/2) h M^2 with M = 1/1.1, h = 0.1
SCALAR_DECREMENT = -0.16 / 1.21


def direct_expectations(U, B, h, u_hat):
    """One-step expectations of spread and mapped energy by explicit mean/covariance algebra."""
    J, K = U.shape[0], B.shape[0]
    E = U - U.mean(0)
    C = E.T @ E / J
    Kg = C @ B.T @ np.linalg.inv(h * B @ C @ B.T + np.eye(K))
    KB = Kg @ B
    R = U - u_hat
    f = lambda X: np.sum((X @ B.T) ** 2) / J
    spread = np.sum((E - h * E @ KB.T) ** 2) / J + h * (1 - 1 / J) * np.sum(Kg ** 2) - np.sum(E ** 2) / J
    mapped = (f(R - h * R @ KB.T) + f(E - h * E @ KB.T) + h * (2 - 1 / J) * np.sum((B @ Kg) ** 2)
              - f(R) - f(E))
    return spread, mapped


def test_report_semantics():
    assert IdentityReport.make("a", 1.0, 1.05, 0.1, 1).passed
    assert not IdentityReport.make("a", 1.0, 1.2, 0.1, 1).passed
    assert IdentityReport.make("b", 1.0, 1.05, 0.1, 1, LE).passed
    assert not IdentityReport.make("b", 1.0, 1.2, 0.1, 1, LE).passed
    assert IdentityReport.make("c", 0.0, -1e-13, 1e-12, 1, GE).passed
    assert set(IdentityReport.make("d", 0, 0, 0, 1).to_dict()) >= {
        "name", "analytic_value", "empirical_value", "tolerance", "passed", "sample_size"}


def test_orthogonality_examples(rng):
    U = rng.normal(size=(4, 2))
    r = check_orthogonality(U, [[1.0, 0.0], [0.0, 0.0]], 0.5, [0.0, 1.0])
    assert r.passed and r.empirical_value <= 1e-12
    assert check_orthogonality(U, rng.normal(size=(2, 2)), 0.5, [0.0, 0.0]).empirical_value == 0.0


def test_orthogonality_rank_one(rng):
    B = np.outer(rng.normal(size=2), rng.normal(size=3))
    U_, _, _ = np.linalg.svd(B)
    y_tilde = 3.0 * U_[:, 1]
    r = check_orthogonality(rng.normal(size=(4, 3)), B, 0.3, y_tilde)
    assert r.passed and r.empirical_value <= 1e-10


def test_orthogonality_rejects_non_orthogonal(rng):
    with pytest.raises(PreconditionError):
        check_orthogonality(rng.normal(size=(4, 2)), [[1.0, 0.0], [0.0, 0.0]], 0.5, [1.0, 1.0])


def test_taming_identity(rng):
    U = rng.normal(size=(5, 3))
    r = check_taming_identity(U, rng.normal(size=(2, 3)), 0.1)
    assert r.passed and r.empirical_value <= 1e-12


def test_spread_decrement_scalar_case():
    U = np.array([[1.0], [-1.0]])
    assert spread_decrement(U, [[1.0]], 0.1) == pytest.approx(SCALAR_DECREMENT, abs=1e-15)
    r = check_spread_decrement(U, [[1.0]], 0.1, N_mc=1_000_000, seed=4)
    assert r.passed and r.sample_size == 1_000_000
    assert r.analytic_value == pytest.approx(-0.13223, abs=1e-5)


def test_spread_decrement_degenerate_cases(rng):
    same = np.ones((3, 2))
    r = check_spread_decrement(same, rng.normal(size=(2, 2)), 0.2, N_mc=1000)
    assert r.passed and r.analytic_value == 0.0 and r.empirical_value == 0.0
    r = check_spread_decrement(rng.normal(size=(3, 2)), np.zeros((2, 2)), 0.2, N_mc=1000)
    assert r.passed and r.analytic_value == 0.0 and r.empirical_value == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4), st.floats(0.01, 1.0),
       st.integers(0, 2 ** 32 - 1))
def test_decrements_match_direct_expectation(J, p, K, h, seed):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(J, p))
    B = rng.normal(size=(K, p))
    u_hat = rng.normal(size=p)
    spread, mapped = direct_expectations(U, B, h, u_hat)
    a = spread_decrement(U, B, h)
    b = residual_decrement(U, B, h, u_hat)
    assert a <= 0 and b <= 0
    assert a == pytest.approx(spread, abs=1e-10 * (1 + abs(spread)))
    assert b == pytest.approx(mapped, abs=1e-10 * (1 + abs(mapped)))


def test_residual_decrement_degenerate_cases(rng):
    B = rng.normal(size=(2, 3))
    same = np.tile(rng.normal(size=3), (4, 1))
    r = check_residual_decrement(same, B, 0.2, same[0], N_mc=1000)
    assert r.analytic_value == 0.0 and r.empirical_value == 0.0 and r.passed
    # residuals zero in B, deviations in ker(B)
    U = np.array([[0.0, -1.0], [0.0, 0.5], [0.0, 2.0]])
    r = check_residual_decrement(U, [[1.0, 0.0]], 0.2, np.zeros(2), N_mc=1000)
    assert r.analytic_value == 0.0 and r.empirical_value == 0.0 and r.passed


def test_residual_decrement_random_instance():
    rng = np.random.default_rng(77)
    U = rng.normal(size=(3, 2))
    B = rng.normal(size=(2, 2))
    u_hat = rng.normal(size=2)
    r = check_residual_decrement(U, B, 0.2, u_hat, N_mc=100_000, seed=8)
    assert r.passed, r


def linear_run(rng, R=200, level=8, project=True, p=3, K=2, J=5, seed=0):
    A = rng.normal(size=(K, p))
    prob = InverseProblem(ForwardModel.linear(A), np.eye(K), rng.normal(size=K))
    U0 = rng.normal(size=(R, J, p))
    if project:
        U0 = U0 @ range_projector(prob.whitened_operator)
    lat = build_lattice(list(range(seed, seed + R)), 1.0, level, J, K)
    return prob, simulate(SchemeConfig(TAMED, level), prob, U0, lat)


def test_sum_bounds_full_run(rng):
    _, tr = linear_run(rng)
    reports = check_sum_bounds(tr)
    assert [r.name for r in reports] == ["sum_bound_hs", "sum_bound_residual"]
    assert all(r.passed for r in reports), reports


def test_sum_bounds_zero_spread():
    prob = InverseProblem(ForwardModel.linear([[1.0, 2.0]]), 1.0, [1.0])
    U0 = np.tile([0.5, -0.25], (3, 3, 1))
    lat = build_lattice([1, 2, 3], 1.0, 4, 3, 1)
    tr = simulate(SchemeConfig(TAMED, 4), prob, U0, lat)
    for r in check_sum_bounds(tr):
        assert r.passed and r.empirical_value == 0.0


def test_sum_bounds_single_step(rng):
    prob, tr = linear_run(rng, R=4, level=0)
    B = prob.whitened_operator
    h = tr.h
    terms = []
    for U in tr.states[0]:
        J = U.shape[0]
        E = U - U.mean(0)
        C = E.T @ E / J
        CBtM = C @ B.T @ np.linalg.inv(h * B @ C @ B.T + np.eye(B.shape[0]))
        terms.append((J + 1) / J * h * np.sum(CBtM ** 2))
        # telescoping base case: the one-step decrement already contains the same term
        assert terms[-1] <= -spread_decrement(U, B, h) + 1e-15
    hs = check_sum_bounds(tr)[0]
    assert hs.empirical_value == pytest.approx(np.mean(terms), rel=1e-10)


def test_kernel_invariance(rng):
    prob, tr = linear_run(rng, R=20)
    r = check_kernel_invariance(tr)
    assert r.passed and r.empirical_value <= 1e-9
    _, bad = linear_run(rng, R=3, project=False)
    with pytest.raises(PreconditionError):
        check_kernel_invariance(bad)


def test_kernel_invariance_invertible_B(rng):
    prob, tr = linear_run(rng, R=3, p=2, K=2, project=False, level=4)
    assert check_kernel_invariance(tr).empirical_value <= 1e-12


def test_kernel_invariance_one_step_rank_one(rng):
    prob = InverseProblem(ForwardModel.linear([[1.0, 2.0, -1.0]]), 1.0, [0.5])
    P = range_projector(prob.whitened_operator)
    U0 = (rng.normal(size=(4, 3)) @ P) + np.array([0.0, 1.0, 2.0]) @ (np.eye(3) - P)
    lat = build_lattice(1, 1.0, 0, 4, 1)
    tr = simulate(SchemeConfig(TAMED, 0), prob, U0, lat)
    r = check_kernel_invariance(tr)
    assert r.empirical_value <= 1e-12


def test_quadform_examples(rng):
    r = check_quadform_nonneg(np.eye(2), np.eye(2))
    assert r.empirical_value == pytest.approx(2.0) and r.passed
    z = rng.normal(size=3)
    S = np.diag([1.0, 2.0, 0.0])
    r = check_quadform_nonneg(np.tile(z, (4, 1)), S)
    assert r.empirical_value == pytest.approx(16 * (z @ z) * (z @ S @ z))
    with pytest.raises(PreconditionError):
        check_quadform_nonneg(np.eye(2), [[1.0, 1.0], [0.0, 1.0]])


def test_quadform_random_psd():
    rng = np.random.default_rng(2)
    for _ in range(500):
        d = int(rng.integers(1, 6))
        J = int(rng.integers(1, 7))
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        lam = rng.random(d) * (rng.random(d) > 0.3)
        assert check_quadform_nonneg(rng.normal(size=(J, d)), Q @ np.diag(lam) @ Q.T).passed


def test_subspace_report(rng):
    _, tr = linear_run(rng, R=3, project=False, level=5)
    assert check_subspace(tr).passed


def test_monotone_trend():
    rng = np.random.default_rng(0)
    base = np.linspace(2.0, 1.0, 50)[:, None] + 0.01 * rng.normal(size=(50, 400))
    assert check_monotone_trend(base, "down").passed
    assert not check_monotone_trend(base[::-1], "up").passed
