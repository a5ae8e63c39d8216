import numpy as np
import pytest
import scipy.sparse as sp

from ddsolve.nonlinear_schwarz import reference_solution
from ddsolve.problems import (ForchheimerProblem, LinearProblem, NonlinearDiffusionProblem, ProblemSpec,
                              assemble_poisson, forchheimer_dq, forchheimer_q)
from ddsolve.decomp import build_grid


def fd_jacobian_error(prob, u, rng, n_dirs=5, eps=1e-6):
    J = prob.jacobian(u)
    worst = 0.0
    for _ in range(n_dirs):
        w = rng.standard_normal(prob.n)
        w /= np.linalg.norm(w)
        fd = (prob.residual(u + eps * w) - prob.residual(u - eps * w)) / (2 * eps)
        worst = max(worst, np.linalg.norm(J @ w - fd) / np.linalg.norm(J @ w))
    return worst


def test_poisson_matrix_2d_structure():
    grid = build_grid(2, [4, 3], 0.25)
    A, f = assemble_poisson(grid)
    assert A.shape == (12, 12)
    np.testing.assert_allclose(A.diagonal(), 4 / 0.25**2)
    # x neighbours are adjacent indices, y neighbours are nx apart
    assert A[5, 6] == A[5, 4] == A[5, 1] == A[5, 9] == -1 / 0.25**2
    assert A[3, 4] == 0  # end of an x row
    np.testing.assert_allclose((A - A.T).toarray(), 0)
    np.testing.assert_array_equal(f, 1.0)


def test_poisson_callable_rhs():
    grid = build_grid(1, [4], 0.2)
    _, f = assemble_poisson(grid, lambda x: x[:, 0])
    np.testing.assert_allclose(f, [0.2, 0.4, 0.6, 0.8])


def test_linear_problem_contract(rng):
    grid = build_grid(1, [10], 1 / 11)
    A, f = assemble_poisson(grid)
    prob = LinearProblem(A, f)
    u = rng.standard_normal(10)
    np.testing.assert_allclose(prob.residual(u), A @ u - f)
    assert prob.jacobian(u) is prob.A


def test_forchheimer_flux_law():
    assert forchheimer_q(0.0, 1.0) == 0.0
    assert forchheimer_q(2.0, 1.0) == pytest.approx(1.0)
    assert forchheimer_q(-2.0, 1.0) == pytest.approx(-1.0)
    y = np.linspace(-3, 3, 13)
    # q solves q + gamma |q| q = y
    for g in (0.5, 1.0, 4.0):
        q = forchheimer_q(y, g)
        np.testing.assert_allclose(q + g * np.abs(q) * q, y, atol=1e-13)
        eps = 1e-7
        np.testing.assert_allclose(forchheimer_dq(y[y != 0], g),
                                   (forchheimer_q(y[y != 0] + eps, g) - forchheimer_q(y[y != 0] - eps, g)) / (2 * eps),
                                   rtol=1e-6)


def test_forchheimer_small_gamma_is_linear_darcy(rng):
    prob = ForchheimerProblem(49, gamma=1e-10)
    u = 1 + rng.random(prob.n)
    h = prob.h
    up = np.concatenate([[prob.u_left], u, [prob.u_right]])
    linear = np.diff(-prob.face_lambda * np.diff(up) / h) / h - prob.rhs
    assert np.linalg.norm(prob.residual(u) - linear) <= 1e-6 * np.linalg.norm(linear)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 3.0])
def test_forchheimer_jacobian_fd(rng, gamma):
    prob = ForchheimerProblem(99, gamma=gamma)
    u = 1 + rng.standard_normal(prob.n)
    assert fd_jacobian_error(prob, u, rng) <= 1e-6
    J = prob.jacobian(u)
    assert J.nnz == 3 * prob.n - 2
    assert (prob.sparsity() != 0).sum() == J.nnz


def test_forchheimer_rejects_bad_input():
    prob = ForchheimerProblem(9)
    with pytest.raises(ValueError):
        prob.residual(np.full(9, np.nan))
    with pytest.raises(ValueError):
        ForchheimerProblem(9, gamma=0.0)


def test_forchheimer_default_setup():
    prob = ForchheimerProblem()
    assert prob.n == 999 and prob.h == pytest.approx(1e-3)
    u = reference_solution(prob)
    assert np.linalg.norm(prob.residual(u)) <= 1e-8 * np.linalg.norm(prob.residual(np.zeros(prob.n)))


def test_nldiffusion_jacobian_fd(rng):
    prob = NonlinearDiffusionProblem(12)
    u = rng.standard_normal(prob.n)
    assert fd_jacobian_error(prob, u, rng) <= 1e-6
    J = prob.jacobian(u)
    assert sp.isspmatrix_csr(J) or isinstance(J, sp.csr_array)
    assert J.nnz == (prob.sparsity() != 0).nnz


def test_nldiffusion_grid_matches_mesh_size():
    prob = NonlinearDiffusionProblem(83)
    assert prob.n == 6889
    assert prob.h == pytest.approx(0.012, abs=1e-4)


def test_nldiffusion_linear_limit_is_laplacian(rng):
    # for u small the operator tends to -Laplace u (boundary data is zero for sin sin)
    prob = NonlinearDiffusionProblem(15)
    A, _ = assemble_poisson(prob.grid)
    u = 1e-5 * rng.standard_normal(prob.n)
    J = prob.jacobian(np.zeros(prob.n))
    np.testing.assert_allclose(J.toarray(), A.toarray(), atol=1e-9)
    lhs = prob.residual(u) + prob.rhs
    assert np.linalg.norm(lhs - A @ u) <= 1e-8 * np.linalg.norm(A @ u)


def test_nldiffusion_truncation_error_is_second_order():
    norms = []
    for n in (15, 31, 63):
        prob = NonlinearDiffusionProblem(n)
        norms.append(np.abs(prob.residual(prob.exact)).max())
    ratios = np.array(norms[:-1]) / np.array(norms[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5)), ratios


@pytest.mark.slow
def test_nldiffusion_discrete_solution_converges_second_order():
    errs = []
    for n in (15, 31, 63):
        prob = NonlinearDiffusionProblem(n)
        errs.append(np.abs(reference_solution(prob) - prob.exact).max())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5)), ratios


def test_problem_spec_round_trip():
    spec = ProblemSpec("forchheimer", [999], [20], 4, {"gamma": 1.0})
    assert ProblemSpec.from_json(spec.to_json()) == spec
    prob, grid = spec.build()
    assert isinstance(prob, ForchheimerProblem) and grid.n == 999
    prob, grid = ProblemSpec("poisson", [5, 6], [1, 2], 1).build()
    assert isinstance(prob, LinearProblem) and prob.n == 30
    prob, _ = ProblemSpec("nldiffusion", [11, 11], [2, 2], 1).build()
    assert isinstance(prob, NonlinearDiffusionProblem)
    with pytest.raises(ValueError, match="valid ids"):
        ProblemSpec("heat", [5], [1], 1)
