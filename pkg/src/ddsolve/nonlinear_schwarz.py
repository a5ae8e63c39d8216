"""Nonlinear RAS/SRAS, the RASPEN/SRASPEN residuals, their Jacobians and the outer Newton loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomp import Decomposition, Skeleton, TransferOps, build_transfer_operators, compute_skeleton
from .history import ConvergenceHistory, OuterNewtonHistory, SolveCounter
from .linalg import SingularMatrixError, SparseLU, gmres
from .linear_schwarz import map_subdomains


class NonlinearProblem(Protocol):
    n: int

    def residual(self, u: np.ndarray) -> np.ndarray: ...

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix: ...

    def sparsity(self) -> sp.csr_matrix: ...


@dataclass
class LocalSolveReport:
    subdomain: int
    iterations: int
    residual_norm: float
    converged: bool
    tolerance: float = 0.0
    stalled: bool = False


class LocalSolveError(RuntimeError):
    def __init__(self, report: LocalSolveReport):
        super().__init__(f"local Newton in subdomain {report.subdomain} did not converge "
                         f"after {report.iterations} iterations (residual {report.residual_norm:.3e})")
        self.report = report


class _BlockGather:
    """Extract R_j J and R_j J P_j from a CSR matrix with a fixed sparsity pattern.

    Positions of the block entries inside ``J.data`` are computed once from
    the pattern; matrices with a different structure fall back to slicing.
    """

    def __init__(self, pattern: sp.csr_matrix, idx: np.ndarray):
        pattern = sp.csr_matrix(pattern, copy=True)
        pattern.sort_indices()
        self.indptr, self.indices = pattern.indptr, pattern.indices
        self.idx = idx
        tagged = sp.csr_matrix((np.arange(1, pattern.nnz + 1, dtype=float), pattern.indices, pattern.indptr),
                               shape=pattern.shape)
        rows = tagged[idx]
        block = rows[:, idx]
        rows.sort_indices()
        block.sort_indices()
        self._rows = (rows.data.astype(np.int64) - 1, rows.indices, rows.indptr, rows.shape)
        self._block = (block.data.astype(np.int64) - 1, block.indices, block.indptr, block.shape)

    def _same_pattern(self, J) -> bool:
        return (sp.isspmatrix_csr(J) and J.indptr.shape == self.indptr.shape and J.nnz == self.indices.size
                and np.array_equal(J.indptr, self.indptr) and np.array_equal(J.indices, self.indices))

    def _take(self, J, spec):
        pos, indices, indptr, shape = spec
        return sp.csr_matrix((J.data[pos], indices, indptr), shape=shape)

    def rows(self, J) -> sp.csr_matrix:
        return self._take(J, self._rows) if self._same_pattern(J) else sp.csr_matrix(J[self.idx])

    def block(self, J) -> sp.csr_matrix:
        return self._take(J, self._block) if self._same_pattern(J) else sp.csr_matrix(J[self.idx][:, self.idx])


class NonlinearSchwarzContext:
    """Problem plus decomposition data and local-solver settings.

    ``inner_rtol``/``max_inner`` control the local Newton solves defining G_j.
    With ``warm_start`` the local solves start from R_j u instead of zero.
    """

    def __init__(self, problem: NonlinearProblem, decomposition: Decomposition,
                 transfer: TransferOps | None = None, skeleton: Skeleton | None = None,
                 inner_rtol: float = 1e-12, max_inner: int = 50, warm_start: bool = False,
                 reuse_inner_jacobian: bool = False, threads: int = 1):
        self.problem = problem
        self.decomposition = decomposition
        self.transfer = transfer or build_transfer_operators(decomposition)
        pattern = sp.csr_matrix(problem.sparsity())
        self.skeleton = skeleton or compute_skeleton(decomposition, pattern)
        self.gathers = [_BlockGather(pattern, idx) for idx in self.transfer.indices]
        self.inner_rtol = inner_rtol
        self.max_inner = max_inner
        self.warm_start = warm_start
        self.reuse_inner_jacobian = reuse_inner_jacobian
        self.threads = threads
        self.counter = SolveCounter()  # linear subdomain solves
        self.newton_counter = SolveCounter()  # nonlinear subdomain solves

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def n_subdomains(self) -> int:
        return len(self.transfer.indices)


def _local_newton(ctx: NonlinearSchwarzContext, j: int, u: np.ndarray, guess: np.ndarray | None):
    """Damped Newton for R_j F(P_j w + (I - P_j R_j) u) = 0; returns (w, report, last local Jacobian)."""
    prob = ctx.problem
    idx = ctx.transfer.indices[j]
    tol = ctx.inner_rtol * (1.0 + np.linalg.norm(prob.residual(u)[idx]))
    z = u.copy()
    if guess is not None:
        z[idx] = guess
    elif ctx.warm_start:
        pass
    else:
        z[idx] = 0.0
    r = prob.residual(z)[idx]
    rnorm = np.linalg.norm(r)
    jac_local = None
    it = 0
    stalled = False
    step_small = True  # no step taken yet
    # the residual test alone can be loose when R_j F(u) is large, so a
    # sizeable last Newton step also keeps the iteration going
    while (rnorm > tol or not step_small) and it < ctx.max_inner:
        jac_local = ctx.gathers[j].block(prob.jacobian(z))
        try:
            delta = SparseLU(jac_local).solve(-r)
        except SingularMatrixError:
            break
        it += 1
        step = 1.0
        w_old = z[idx].copy()
        accepted = False
        for _ in range(31):
            z[idx] = w_old + step * delta
            try:
                r_new = prob.residual(z)[idx]
                rn_new = np.linalg.norm(r_new)
            except ValueError:
                rn_new = np.inf
            if rn_new <= (1.0 - 1e-4 * step) * rnorm:
                accepted = True
                break
            step *= 0.5
        at_roundoff = np.linalg.norm(delta, np.inf) <= 1e-12 * (1.0 + np.linalg.norm(w_old, np.inf))
        if not accepted:
            z[idx] = w_old
            # no decrease even for tiny steps; this is only success at the roundoff floor
            stalled = bool(at_roundoff)
            break
        r, rnorm = r_new, rn_new
        step_small = step == 1.0 and np.linalg.norm(delta, np.inf) <= 1e-8 * (1.0 + np.linalg.norm(z[idx], np.inf))
        if step == 1.0 and np.linalg.norm(delta, np.inf) <= 1e-14 * (1.0 + np.linalg.norm(z[idx], np.inf)):
            stalled = True
            break
    converged = bool(rnorm <= tol or stalled)
    report = LocalSolveReport(j, it, float(rnorm), converged, float(tol), stalled)
    if not converged:
        raise LocalSolveError(report)
    return z[idx].copy(), report, jac_local


def local_solve_Gj(ctx: NonlinearSchwarzContext, j: int, u: np.ndarray, guess: np.ndarray | None = None):
    """G_j(u): the local solution with exterior data frozen at u."""
    w, report, _ = _local_newton(ctx, j, u, guess)
    return w, report


@dataclass
class SubdomainStates:
    """Local solutions at one point, cached for Jacobian applications.

    ``u_j(j)`` is the volume state u^(j) = P_j G_j(u) + (I - P_j R_j) u.
    """

    point: np.ndarray
    local: list[np.ndarray]
    reports: list[LocalSolveReport]
    inner_jacobians: list = field(default_factory=list, repr=False)
    _rows: list | None = field(default=None, repr=False)
    _factors: list | None = field(default=None, repr=False)

    def u_j(self, transfer: TransferOps, j: int) -> np.ndarray:
        z = self.point.copy()
        z[transfer.indices[j]] = self.local[j]
        return z

    @property
    def max_inner_iterations(self) -> int:
        return max((r.iterations for r in self.reports), default=0)


def _solve_all(ctx: NonlinearSchwarzContext, u: np.ndarray, guesses=None) -> SubdomainStates:
    def one(j):
        return _local_newton(ctx, j, u, None if guesses is None else guesses[j])

    out = map_subdomains(one, ctx.n_subdomains, ctx.threads)
    ctx.newton_counter.add_round(ctx.n_subdomains)
    return SubdomainStates(u.copy(), [o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


def _assemble(ctx: NonlinearSchwarzContext, states: SubdomainStates) -> np.ndarray:
    out = np.zeros(ctx.n)
    for j, w in enumerate(states.local):
        ctx.transfer.prolong_owned(j, w, out)
    return out


def nras_step(ctx: NonlinearSchwarzContext, u: np.ndarray, guesses=None) -> np.ndarray:
    """sum_j P~_j G_j(u)."""
    return _assemble(ctx, _solve_all(ctx, u, guesses))


def nsras_step(ctx: NonlinearSchwarzContext, v: np.ndarray, guesses=None) -> np.ndarray:
    sk = ctx.skeleton
    return sk.restrict(nras_step(ctx, sk.extend(v), guesses))


def iterate_nonlinear(ctx: NonlinearSchwarzContext, variant: str = "NRAS", x0=None, rtol: float = 1e-10,
                      maxit: int = 200, reference: np.ndarray | None = None,
                      keep_iterates: bool = False) -> ConvergenceHistory:
    """Fixed-point sweeps of nonlinear RAS (volume) or nonlinear SRAS (skeleton).

    ``err`` is the relative volume error of sum_j P~_j G_j(.) against
    ``reference`` (for NSRAS this is the volume field the sweep produces
    before restriction); ``res`` is the sweep increment relative to the first.
    Without a reference the increment drives the stopping test.
    """
    variant = variant.upper()
    if variant not in ("NRAS", "NSRAS"):
        raise ValueError(f"unknown variant {variant!r}; expected 'NRAS' or 'NSRAS'")
    sk = ctx.skeleton
    sub = variant == "NSRAS"
    x = np.zeros(sk.n_bar if sub else ctx.n) if x0 is None else np.array(x0, dtype=float)
    ref_norm = np.linalg.norm(reference) if reference is not None else 0.0
    ctx.newton_counter.reset()
    hist = ConvergenceHistory(variant)
    volume = sk.extend(x) if sub else x

    def rel(y):
        return float(np.linalg.norm(y - reference) / (ref_norm if ref_norm > 0 else 1.0))

    hist.record(err=rel(volume) if reference is not None else None, res=None, counter=ctx.newton_counter)
    if keep_iterates:
        hist.iterates.append(x.copy())
    inc0 = None
    for _ in range(maxit):
        volume = nras_step(ctx, sk.extend(x) if sub else x)
        x_new = sk.restrict(volume) if sub else volume
        inc = float(np.linalg.norm(x_new - x))
        inc0 = inc if inc0 is None else inc0
        x = x_new
        if keep_iterates:
            hist.iterates.append(x.copy())
        r = inc / inc0 if inc0 > 0 else 0.0
        e = rel(volume) if reference is not None else None
        hist.record(err=e, res=r, counter=ctx.newton_counter)
        crit = e if e is not None else r
        if crit <= rtol:
            hist.converged = True
            break
        if not np.isfinite(crit) or (e is not None and e > 1e6 * max(hist.err[0], 1.0)):
            hist.diverged = True
            break
    hist.solution = volume
    return hist


def raspen_residual(ctx: NonlinearSchwarzContext, u: np.ndarray, guesses=None):
    """F(u) = u - sum_j P~_j G_j(u), plus the subdomain states for Jacobian reuse."""
    states = _solve_all(ctx, np.asarray(u, dtype=float), guesses)
    return u - _assemble(ctx, states), states


def sraspen_residual(ctx: NonlinearSchwarzContext, v: np.ndarray, guesses=None):
    """F-bar(v) = R-bar F(P-bar v); the states are those of the volume point P-bar v."""
    sk = ctx.skeleton
    res, states = raspen_residual(ctx, sk.extend(v), guesses)
    return sk.restrict(res), states


def _prepare_jacobian(ctx: NonlinearSchwarzContext, states: SubdomainStates) -> None:
    if states._factors is not None:
        return
    rows, factors = [], []
    for j in range(ctx.n_subdomains):
        J = ctx.problem.jacobian(states.u_j(ctx.transfer, j))
        rows.append(ctx.gathers[j].rows(J))
        if ctx.reuse_inner_jacobian and states.inner_jacobians[j] is not None:
            local = states.inner_jacobians[j]
        else:
            local = ctx.gathers[j].block(J)
        factors.append(SparseLU(local))
    states._rows, states._factors = rows, factors


def raspen_jacobian_apply(ctx: NonlinearSchwarzContext, states: SubdomainStates, w: np.ndarray) -> np.ndarray:
    """sum_j P~_j (R_j J(u^(j)) P_j)^{-1} R_j J(u^(j)) w."""
    _prepare_jacobian(ctx, states)
    tr = ctx.transfer
    local = map_subdomains(lambda j: states._factors[j].solve(states._rows[j] @ w), ctx.n_subdomains, ctx.threads)
    ctx.counter.add_round(ctx.n_subdomains)
    out = np.zeros(ctx.n)
    for j, x in enumerate(local):
        tr.prolong_owned(j, x, out)
    return out


def sraspen_jacobian_apply(ctx: NonlinearSchwarzContext, states: SubdomainStates, w: np.ndarray) -> np.ndarray:
    sk = ctx.skeleton
    return sk.restrict(raspen_jacobian_apply(ctx, states, sk.extend(w)))


def sraspen_jacobian(ctx: NonlinearSchwarzContext, states: SubdomainStates) -> np.ndarray:
    """Dense N-bar x N-bar Jacobian, one parallel round of local solves per column."""
    nb = ctx.skeleton.n_bar
    out = np.zeros((nb, nb))
    e = np.zeros(nb)
    for i in range(nb):
        e[i] = 1.0
        out[:, i] = sraspen_jacobian_apply(ctx, states, e)
        e[i] = 0.0
    return out


def raspen_jacobian(ctx: NonlinearSchwarzContext, states: SubdomainStates) -> np.ndarray:
    """Dense N_v x N_v Jacobian by columns (N_v parallel rounds)."""
    n = ctx.n
    out = np.zeros((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        out[:, i] = raspen_jacobian_apply(ctx, states, e)
        e[i] = 0.0
    return out


METHODS = ("RASPEN", "SRASPEN", "PLAIN_NEWTON")


def reference_solution(problem: NonlinearProblem, u0=None, tol: float = 1e-14, maxit: int = 200) -> np.ndarray:
    """Globalized Newton with sparse direct solves; the 'exact' discrete solution."""
    u = np.zeros(problem.n) if u0 is None else np.array(u0, dtype=float)
    r = problem.residual(u)
    rn = np.linalg.norm(r)
    r0 = rn
    for _ in range(maxit):
        delta = spla.spsolve(sp.csc_matrix(problem.jacobian(u)), -r)
        try:
            u, r, rn = _backtrack(lambda x: problem.residual(x), u, delta, rn)
        except StagnationError:
            if rn <= 1e-8 * max(r0, 1.0):
                break  # at the roundoff floor of the residual
            raise
        if rn <= tol * max(r0, 1.0) or np.linalg.norm(delta, np.inf) <= 1e-15 * (1 + np.linalg.norm(u, np.inf)):
            break
    return u


def _backtrack(residual, u, delta, rnorm, max_halvings: int = 30):
    step = 1.0
    for _ in range(max_halvings + 1):
        trial = u + step * delta
        try:
            r = residual(trial)
            rn = np.linalg.norm(r)
        except (ValueError, LocalSolveError):
            rn = np.inf
        if np.isfinite(rn) and rn <= (1.0 - 1e-4 * step) * rnorm:
            return trial, r, rn
        step *= 0.5
    raise StagnationError("line search failed to reduce the residual")


class StagnationError(RuntimeError):
    pass


def newton_outer(ctx: NonlinearSchwarzContext, method: str = "RASPEN", x0=None, outer_rtol: float = 1e-12,
                 maxit: int = 50, jacobian_solver: str | None = None, inner_rtol: float = 1e-12,
                 line_search: bool | None = None, reference: np.ndarray | None = None,
                 stop_on: str = "error") -> OuterNewtonHistory:
    """Exact Newton on the RASPEN, SRASPEN or plain residual.

    Stopping: relative error against ``reference`` (``stop_on="error"``) or
    residual reduction relative to the initial residual. ``jacobian_solver``
    is ``"gmres"`` (matrix-free, rtol ``inner_rtol``) or ``"direct"`` (dense
    assembly by columns; a sparse solve for PLAIN_NEWTON). The default is
    GMRES for the preconditioned methods and direct for PLAIN_NEWTON. Line search defaults on for PLAIN_NEWTON only;
    the preconditioned methods fall back to halving when a step fails.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    if jacobian_solver is None:
        jacobian_solver = "direct" if method == "PLAIN_NEWTON" else "gmres"
    if jacobian_solver not in ("gmres", "direct"):
        raise ValueError(f"unknown jacobian solver {jacobian_solver!r}")
    if line_search is None:
        line_search = method == "PLAIN_NEWTON"
    prob, sk = ctx.problem, ctx.skeleton
    sub = method == "SRASPEN"

    if method == "PLAIN_NEWTON":
        def evaluate(x):
            return prob.residual(x), None
    elif sub:
        def evaluate(x):
            return sraspen_residual(ctx, x)
    else:
        def evaluate(x):
            return raspen_residual(ctx, x)

    def volume_of(x, res, states):
        if method == "PLAIN_NEWTON":
            return x
        if sub:
            # sum_j P~_j G_j(P-bar v) comes for free from the residual evaluation
            return _assemble(ctx, states)
        return x

    x = (np.zeros(sk.n_bar if sub else ctx.n) if x0 is None else np.array(x0, dtype=float))
    ref_norm = np.linalg.norm(reference) if reference is not None else None

    def rel_err(vol):
        if reference is None:
            return None
        return float(np.linalg.norm(vol - reference) / (ref_norm if ref_norm > 0 else 1.0))

    hist = OuterNewtonHistory(method)
    t0 = time.perf_counter()
    res, states = evaluate(x)
    res_norm = np.linalg.norm(res)
    res0 = res_norm if res_norm > 0 else 1.0
    hist.iterates.append(x.copy())
    hist.volume_iterates.append(volume_of(x, res, states))
    hist.err.append(rel_err(hist.volume_iterates[-1]))
    hist.res.append(float(res_norm / res0))
    hist.inner_gmres.append(0)
    hist.inner_newton.append(0)
    hist.coarse_newton.append(0)
    hist.basis_bytes.append(0)
    hist.wall_ms.append((time.perf_counter() - t0) * 1e3)

    def done():
        if stop_on == "error" and reference is not None:
            return hist.err[-1] <= outer_rtol
        return hist.res[-1] <= outer_rtol

    if done():
        hist.converged = True
    for _ in range(maxit):
        if hist.converged:
            break
        l_in = states.max_inner_iterations if states is not None else 0
        if method == "PLAIN_NEWTON":
            J = prob.jacobian(x)
            if jacobian_solver == "direct":
                delta = spla.spsolve(sp.csc_matrix(J), -res)
                its, nbytes = 1, 0
            else:
                g = gmres(lambda w: J @ w, -res, rtol=inner_rtol, maxit=ctx.n)
                delta, its, nbytes = g.x, g.iterations, g.stored_basis_bytes
        else:
            apply = (lambda w: sraspen_jacobian_apply(ctx, states, w)) if sub else \
                (lambda w: raspen_jacobian_apply(ctx, states, w))
            if jacobian_solver == "direct":
                Jd = sraspen_jacobian(ctx, states) if sub else raspen_jacobian(ctx, states)
                delta = np.linalg.solve(Jd, -res)
                its, nbytes = Jd.shape[0], 0
            else:
                g = gmres(apply, -res, rtol=inner_rtol, maxit=len(x))
                delta, its, nbytes = g.x, g.iterations, g.stored_basis_bytes

        try:
            if line_search:
                x_new, _, _ = _backtrack(lambda y: evaluate(y)[0], x, delta, res_norm)
                res, states = evaluate(x_new)
            else:
                x_new, res, states = _undamped_with_fallback(evaluate, x, delta)
        except StagnationError:
            hist.diverged = True
            break
        x = x_new
        res_norm = np.linalg.norm(res)
        hist.iterates.append(x.copy())
        hist.volume_iterates.append(volume_of(x, res, states))
        hist.err.append(rel_err(hist.volume_iterates[-1]))
        hist.res.append(float(res_norm / res0))
        hist.inner_gmres.append(int(its))
        hist.inner_newton.append(int(l_in))
        hist.coarse_newton.append(0)
        hist.basis_bytes.append(int(nbytes))
        hist.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if not np.isfinite(res_norm):
            hist.diverged = True
            break
        if done():
            hist.converged = True
    hist.solution = hist.volume_iterates[-1]
    return hist


def _undamped_with_fallback(evaluate, x, delta, max_halvings: int = 30):
    step = 1.0
    for _ in range(max_halvings + 1):
        trial = x + step * delta
        try:
            res, states = evaluate(trial)
            if np.all(np.isfinite(res)):
                return trial, res, states
        except (LocalSolveError, ValueError):
            pass
        step *= 0.5
    raise StagnationError("no admissible step length")
