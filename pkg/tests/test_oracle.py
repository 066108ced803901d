import numpy as np
import pytest

from cunet.oracle import (
    CSCProblem,
    MCSCProblem,
    SolverConfig,
    concat_banks,
    csc_objective,
    ista_csc,
    lipschitz_upper_bound,
    mcsc_alternating_solve,
    mcsc_objective,
)
from cunet.tensor import ContractError, adjoint_conv, conv_same, l1_norm, sq_l2_norm

from conftest import fista_lasso, synthesis_matrix


def delta_bank():
    b = np.zeros((1, 3, 3, 1))
    b[0, 1, 1, 0] = 1.0
    return b


def random_mcsc(seed, size=8, K=2, s=3, lam=0.1):
    g = np.random.default_rng(seed)
    banks = [g.standard_normal((K, s, s, 1)) / s for _ in range(4)]
    return MCSCProblem(g.uniform(size=(size, size, 1)), g.uniform(size=(size, size, 1)), *banks, lam)


def test_lipschitz_delta_and_scaling(rng):
    assert lipschitz_upper_bound(delta_bank()) == pytest.approx(1.01, abs=1e-3)
    bank = rng.standard_normal((2, 3, 3, 1))
    L1 = lipschitz_upper_bound(bank, shape=(8, 8))
    L2 = lipschitz_upper_bound(2 * bank, shape=(8, 8))
    assert L2 / L1 == pytest.approx(4.0, rel=0.01)


def test_lipschitz_matches_dense_eigenvalue(rng):
    bank = rng.standard_normal((2, 3, 3, 1))
    S = synthesis_matrix(bank, 8, 8)
    top = np.linalg.eigvalsh(S.T @ S).max()
    L = lipschitz_upper_bound(bank, shape=(8, 8), iters=500)
    assert L >= top
    assert L == pytest.approx(top, rel=0.015)


def test_csc_objective_simple_cases(rng):
    x = rng.uniform(size=(6, 6, 1))
    bank = rng.standard_normal((2, 3, 3, 1))
    p = CSCProblem(x, bank, 0.3)
    assert csc_objective(p, np.zeros((6, 6, 2))) == pytest.approx(0.5 * sq_l2_norm(x))
    assert csc_objective(CSCProblem(0 * x, bank, 0.3), np.zeros((6, 6, 2))) == 0.0
    assert csc_objective(CSCProblem(x, delta_bank(), 0.0), x) == pytest.approx(0.0, abs=1e-28)


def test_ista_zero_input_and_identity_dictionary(rng):
    cfg = SolverConfig(inner_iters=7, tolerance=0.0)
    U, _ = ista_csc(CSCProblem(np.zeros((6, 6, 1)), rng.standard_normal((2, 3, 3, 1)), 0.1), cfg)
    assert not U.any()
    x = rng.standard_normal((6, 6, 1))
    U, _ = ista_csc(CSCProblem(x, delta_bank(), 0.4), SolverConfig(inner_iters=1, step_size=1.0))
    np.testing.assert_allclose(U, np.sign(x) * np.maximum(np.abs(x) - 0.4, 0))


def test_ista_large_lambda_keeps_zero(rng):
    x = rng.uniform(size=(8, 8, 1))
    bank = rng.standard_normal((2, 3, 3, 1))
    lam = np.abs(conv_same(bank, x)).max()
    U, trace = ista_csc(CSCProblem(x, bank, lam), SolverConfig(inner_iters=20, tolerance=0.0))
    assert not U.any()
    assert trace[-1] == pytest.approx(0.5 * sq_l2_norm(x))


def test_ista_matches_long_run_dense_solver():
    g = np.random.default_rng(7)
    x = g.uniform(size=(8, 8, 1))
    bank = g.standard_normal((2, 3, 3, 1)) / 3
    U, trace = ista_csc(CSCProblem(x, bank, 0.1), SolverConfig(inner_iters=500, tolerance=0.0))
    ref = fista_lasso(synthesis_matrix(bank, 8, 8), x.ravel(), 0.1, 5000)
    assert trace[-1] <= ref * 1.005
    assert trace[-1] >= ref * (1 - 1e-9)


def test_ista_monotone_and_divergence_guard(rng):
    x = rng.uniform(size=(8, 8, 1))
    bank = rng.standard_normal((2, 3, 3, 1))
    _, trace = ista_csc(CSCProblem(x, bank, 0.1), SolverConfig(inner_iters=100, tolerance=0.0))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))


def test_ista_early_stop(rng):
    x = rng.uniform(size=(8, 8, 1))
    bank = rng.standard_normal((2, 3, 3, 1))
    _, trace = ista_csc(CSCProblem(x, bank, 0.1), SolverConfig(inner_iters=5000, tolerance=1e-6))
    assert len(trace) < 5000


def test_mcsc_objective_recomposition(rng):
    p = random_mcsc(3)
    C, U, V = (rng.standard_normal((8, 8, 2)) for _ in range(3))
    assert mcsc_objective(p, 0 * C, 0 * U, 0 * V) == pytest.approx(0.5 * sq_l2_norm(p.x) + 0.5 * sq_l2_norm(p.y))
    rx = p.x - adjoint_conv(p.d_c, C) - adjoint_conv(p.d_u, U)
    ry = p.y - adjoint_conv(p.h_c, C) - adjoint_conv(p.h_v, V)
    manual = 0.5 * sq_l2_norm(rx) + 0.5 * sq_l2_norm(ry) + p.lam * (l1_norm(C) + l1_norm(U) + l1_norm(V))
    assert mcsc_objective(p, C, U, V) == pytest.approx(manual, rel=1e-12)
    with pytest.raises(ContractError):
        mcsc_objective(p, C[..., :1], U, V)


def test_mcsc_zero_and_large_lambda():
    p = random_mcsc(4)
    zero = MCSCProblem(0 * p.x, 0 * p.y, p.d_c, p.d_u, p.h_c, p.h_v, p.lam)
    C, U, V, _ = mcsc_alternating_solve(zero, SolverConfig(inner_iters=5, outer_iters=2))
    assert not (C.any() or U.any() or V.any())
    big = MCSCProblem(p.x, p.y, p.d_c, p.d_u, p.h_c, p.h_v, 1e3)
    C, U, V, trace = mcsc_alternating_solve(big, SolverConfig(inner_iters=5, outer_iters=2))
    assert not (C.any() or U.any() or V.any())
    assert trace[-1] == pytest.approx(0.5 * sq_l2_norm(p.x) + 0.5 * sq_l2_norm(p.y))


def joint_oracle(p: MCSCProblem, iters=20000):
    n = p.x.shape[0]
    Sdc, Sdu = synthesis_matrix(p.d_c, n, n), synthesis_matrix(p.d_u, n, n)
    Shc, Shv = synthesis_matrix(p.h_c, n, n), synthesis_matrix(p.h_v, n, n)
    Z = np.zeros_like(Sdu)
    S = np.block([[Sdc, Sdu, Z], [Shc, Z, Shv]])
    return fista_lasso(S, np.concatenate([p.x.ravel(), p.y.ravel()]), p.lam, iters)


def test_mcsc_monotone_and_close_to_joint_solver():
    p = random_mcsc(5)
    # block-coordinate descent is slow on this problem; 40 cycles instead of the default 10
    _, _, _, trace = mcsc_alternating_solve(p, SolverConfig(outer_iters=40, tolerance=0.0))
    assert len(trace) == 1 + 3 * 40
    assert all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))
    ref = joint_oracle(p)
    assert trace[-1] <= ref * 1.01


def test_concat_banks_shape(rng):
    a, b = rng.standard_normal((3, 5, 5, 1)), rng.standard_normal((3, 5, 5, 1))
    assert concat_banks(a, b).shape == (3, 5, 5, 2)
