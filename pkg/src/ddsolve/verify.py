"""Quick invariant suite behind ``ddsolve verify`` (small instances, a few seconds)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomp import build_grid, build_transfer_operators, compute_skeleton, partition_overlapping
from .linear_schwarz import (LinearSchwarzContext, check_krylov_restriction, gmres_ras, gmres_sras, ras_step,
                             sras_step)
from .nonlinear_schwarz import (NonlinearSchwarzContext, nras_step, raspen_jacobian_apply, raspen_residual,
                                reference_solution)
from .problems import ForchheimerProblem, LinearProblem, NonlinearDiffusionProblem, assemble_poisson
from .two_level import build_volume_coarse, build_substructured_coarse, fas_correction_volume


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def _poisson_1d(n=99, parts=5, layers=2):
    grid = build_grid(1, [n], 1.0 / (n + 1))
    A, f = assemble_poisson(grid)
    return LinearSchwarzContext(A, f, partition_overlapping(grid, [parts], layers)), grid


def check_partition_of_unity() -> Check:
    worst = 0
    for dims, counts, layers in (([9], [2], 1), ([12, 10], [3, 2], 1), ([7, 6, 5], [2, 2, 1], 1)):
        grid = build_grid(len(dims), dims, 0.1)
        tr = build_transfer_operators(partition_overlapping(grid, counts, layers))
        total = np.zeros(grid.n, dtype=int)
        for j in range(len(tr.indices)):
            total[tr.indices[j][tr.owned[j]]] += 1
        worst = max(worst, int(np.abs(total - 1).max()))
    return Check("partition of unity sum_j P~_j R_j = I", worst == 0, f"max deviation {worst}")


def check_skeleton_definition() -> Check:
    """Brute force K = {k : R_j A (e_k - P_j R_j e_k) != 0 for some j} on a small 2D grid."""
    grid = build_grid(2, [8, 7], 0.1)
    A, _ = assemble_poisson(grid)
    dec = partition_overlapping(grid, [2, 2], 1)
    sk = compute_skeleton(dec, A)
    brute = set()
    A = A.tocsc()
    for k in range(grid.n):
        for idx in dec.overlap_sets:
            if k in set(idx.tolist()):
                continue
            if np.any(A[idx, k].toarray() != 0):
                brute.add(k)
    ok = brute == set(sk.indices.tolist())
    v = np.arange(sk.n_bar, dtype=float)
    ok = ok and np.array_equal(sk.restrict(sk.extend(v)), v)
    return Check("skeleton matches its definition; R-bar P-bar = I", ok, f"N-bar = {sk.n_bar}")


def check_ras_sras_equivalence() -> Check:
    ctx, _ = _poisson_1d()
    sk = ctx.skeleton
    u = np.zeros(ctx.n)
    v = sk.restrict(u)
    worst = 0.0
    for _ in range(20):
        u, v = ras_step(ctx, u), sras_step(ctx, v)
        worst = max(worst, float(np.abs(sk.restrict(u) - v).max()))
    return Check("restricted RAS iterates equal SRAS iterates", worst <= 1e-11, f"max diff {worst:.2e}")


def check_gmres_bounds() -> Check:
    ctx, _ = _poisson_1d()
    nb = ctx.skeleton.n_bar
    _, rv = gmres_ras(ctx, rtol=1e-10)
    _, rs = gmres_sras(ctx, rtol=1e-10)
    ok = rs.iterations <= nb and (rv.breakdown or rv.iterations <= nb + 1)
    return Check("GMRES-SRAS <= N-bar, GMRES-RAS <= N-bar + 1", ok,
                 f"N-bar {nb}, RAS {rv.iterations}, SRAS {rs.iterations}")


def check_krylov() -> Check:
    ctx, _ = _poisson_1d()
    rep = check_krylov_restriction(ctx, k=5)
    return Check("restricted Krylov identity for k <= 5", rep.ok, f"max identity error {max(rep.identity_errors):.2e}")


def check_linear_reduction() -> Check:
    ctx, _ = _poisson_1d()
    nctx = NonlinearSchwarzContext(LinearProblem(ctx.A, ctx.f), ctx.decomposition)
    u = np.random.default_rng(1).standard_normal(ctx.n)
    diff = np.abs(nras_step(nctx, u) - ras_step(ctx, u)).max() / max(np.abs(ras_step(ctx, u)).max(), 1.0)
    return Check("nonlinear RAS reduces to linear RAS for F(u) = Au - f", diff <= 1e-11, f"rel diff {diff:.2e}")


def check_jacobian_fd() -> Check:
    prob = ForchheimerProblem(99)
    ctx = NonlinearSchwarzContext(prob, partition_overlapping(prob.grid, [4], 2))
    rng = np.random.default_rng(2)
    u = 1.0 + 0.5 * rng.random(prob.n)
    base, states = raspen_residual(ctx, u)
    worst = 0.0
    for _ in range(5):
        w = rng.standard_normal(prob.n)
        w /= np.linalg.norm(w)
        eps = 1e-6
        fd = (raspen_residual(ctx, u + eps * w)[0] - raspen_residual(ctx, u - eps * w)[0]) / (2 * eps)
        jw = raspen_jacobian_apply(ctx, states, w)
        worst = max(worst, float(np.linalg.norm(jw - fd) / np.linalg.norm(jw)))
    return Check("RASPEN Jacobian matches finite differences", worst <= 1e-4, f"max rel diff {worst:.2e}")


def check_fas_consistency() -> Check:
    prob = NonlinearDiffusionProblem(15)
    ustar = reference_solution(prob)
    coarse = build_volume_coarse(prob.grid)
    c0, _, _ = fas_correction_volume(prob, coarse, ustar)
    val = float(np.abs(c0).max())
    return Check("FAS correction vanishes at the discrete solution", val <= 1e-10, f"max |C0(u*)| {val:.2e}")


def check_coarse_spaces() -> Check:
    prob = NonlinearDiffusionProblem(15)
    ctx = NonlinearSchwarzContext(prob, partition_overlapping(prob.grid, [2, 2], 1))
    worst = 0.0
    for c in (build_volume_coarse(prob.grid), build_substructured_coarse(ctx.skeleton, prob.grid)):
        eye = (c.injection @ c.prolongation).toarray()
        worst = max(worst, float(np.abs(eye - np.eye(c.dim)).max()))
        ok_rank = np.linalg.matrix_rank(c.prolongation.toarray()) == c.dim
        if not ok_rank:
            return Check("coarse prolongations have full column rank", False, "rank deficient")
    return Check("coarse injection o prolongation = I, full column rank", worst <= 1e-12, f"max dev {worst:.2e}")


CHECKS = (check_partition_of_unity, check_skeleton_definition, check_ras_sras_equivalence, check_gmres_bounds,
          check_krylov, check_linear_reduction, check_jacobian_fd, check_fas_consistency, check_coarse_spaces)


def run_checks() -> list[Check]:
    out = []
    for fn in CHECKS:
        try:
            out.append(fn())
        except Exception as exc:  # report, keep going
            out.append(Check(fn.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return out
