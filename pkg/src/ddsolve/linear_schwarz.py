"""Linear RAS/SRAS: stationary sweeps, the RAS preconditioner and GMRES drivers."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomp import Decomposition, Skeleton, TransferOps, build_transfer_operators, compute_skeleton
from .history import ConvergenceHistory, SolveCounter
from .linalg import GmresResult, factorize, gmres, numerical_rank


def map_subdomains(fn, n: int, threads: int = 1) -> list:
    if threads <= 1 or n <= 1:
        return [fn(j) for j in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


class LinearSchwarzContext:
    """Matrix, right-hand side, decomposition data and factored local matrices A_j = R_j A P_j."""

    def __init__(self, A, f, decomposition: Decomposition, transfer: TransferOps | None = None,
                 skeleton: Skeleton | None = None, threads: int = 1):
        self.A = sp.csr_matrix(A)
        self.f = np.asarray(f, dtype=float)
        self.decomposition = decomposition
        self.transfer = transfer or build_transfer_operators(decomposition)
        self.skeleton = skeleton or compute_skeleton(decomposition, self.A)
        self.threads = threads
        self.counter = SolveCounter()
        self.local_matrices = [self.A[idx][:, idx].tocsc() for idx in self.transfer.indices]
        self.local_factors = [factorize(a) for a in self.local_matrices]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_subdomains(self) -> int:
        return len(self.local_factors)

    def direct_solution(self) -> np.ndarray:
        return spla.spsolve(self.A.tocsc(), self.f)


def build_context(A, f, decomposition, threads: int = 1) -> LinearSchwarzContext:
    return LinearSchwarzContext(A, f, decomposition, threads=threads)


def apply_M_inv(ctx: LinearSchwarzContext, r: np.ndarray) -> np.ndarray:
    """sum_j P~_j A_j^{-1} R_j r."""
    tr = ctx.transfer
    local = map_subdomains(lambda j: ctx.local_factors[j].solve(r[tr.indices[j]]), ctx.n_subdomains, ctx.threads)
    ctx.counter.add_round(ctx.n_subdomains)
    out = np.zeros(ctx.n)
    for j, w in enumerate(local):
        tr.prolong_owned(j, w, out)
    return out


def ras_step(ctx: LinearSchwarzContext, u: np.ndarray) -> np.ndarray:
    return u + apply_M_inv(ctx, ctx.f - ctx.A @ u)


def ras_step_local_form(ctx: LinearSchwarzContext, u: np.ndarray) -> np.ndarray:
    """The same sweep written with exterior Dirichlet data: sum_j P~_j A_j^{-1} R_j (f - A (I - P_j R_j) u)."""
    tr = ctx.transfer

    def local(j):
        idx = tr.indices[j]
        exterior = u.copy()
        exterior[idx] = 0.0
        return ctx.local_factors[j].solve(ctx.f[idx] - (ctx.A[idx] @ exterior))

    out = np.zeros(ctx.n)
    for j, w in enumerate(map_subdomains(local, ctx.n_subdomains, ctx.threads)):
        tr.prolong_owned(j, w, out)
    ctx.counter.add_round(ctx.n_subdomains)
    return out


def sras_step(ctx: LinearSchwarzContext, v: np.ndarray) -> np.ndarray:
    sk = ctx.skeleton
    return sk.restrict(ras_step(ctx, sk.extend(v)))


def harmonic_extension(ctx: LinearSchwarzContext, v: np.ndarray) -> np.ndarray:
    """Volume field from skeleton data: one RAS sweep started at P-bar v."""
    return ras_step(ctx, ctx.skeleton.extend(v))


def _rel(a: float, b: float) -> float:
    return a / b if b > 0 else a


def solve_stationary(ctx: LinearSchwarzContext, variant: str = "RAS", x0=None, rtol: float = 1e-10,
                     maxit: int = 1000, mode: str = "error", reference: np.ndarray | None = None,
                     keep_iterates: bool = False) -> ConvergenceHistory:
    """Run RAS or SRAS sweeps until the relative error (or increment) drops below ``rtol``.

    In error mode the reference defaults to a direct sparse solve; SRAS errors
    are measured on the skeleton. In residual mode the monitored quantity is
    the sweep increment (the preconditioned residual) relative to the first one.
    """
    variant = variant.upper()
    if variant not in ("RAS", "SRAS"):
        raise ValueError(f"unknown variant {variant!r}; expected 'RAS' or 'SRAS'")
    if mode not in ("error", "residual"):
        raise ValueError(f"unknown mode {mode!r}")
    sk = ctx.skeleton
    sub = variant == "SRAS"
    step = (lambda x: sras_step(ctx, x)) if sub else (lambda x: ras_step(ctx, x))
    dim = sk.n_bar if sub else ctx.n
    x = np.zeros(dim) if x0 is None else np.array(x0, dtype=float)

    ref = None
    if mode == "error":
        ref = ctx.direct_solution() if reference is None else reference
        if sub:
            ref = sk.restrict(ref)
        ref_norm = np.linalg.norm(ref)

    ctx.counter.reset()
    hist = ConvergenceHistory(variant)
    if keep_iterates:
        hist.iterates.append(x.copy())

    def error(y):
        return _rel(np.linalg.norm(y - ref), ref_norm)

    err0 = error(x) if mode == "error" else None
    hist.record(err=err0, res=None, counter=ctx.counter)
    if mode == "error" and (err0 <= rtol or ref_norm == 0 and err0 == 0):
        hist.converged = True
        hist.solution = x
        return hist
    inc0 = None
    for _ in range(maxit):
        x_new = step(x)
        inc = np.linalg.norm(x_new - x)
        inc0 = inc if inc0 is None else inc0
        x = x_new
        if keep_iterates:
            hist.iterates.append(x.copy())
        if mode == "error":
            e = error(x)
            hist.record(err=e, res=_rel(inc, inc0), counter=ctx.counter)
            if e <= rtol:
                hist.converged = True
                break
            if not np.isfinite(e) or e > 1e6 * max(err0, 1e-300):
                hist.diverged = True
                break
        else:
            r = _rel(inc, inc0)
            hist.record(err=None, res=r, counter=ctx.counter)
            if inc == 0.0 or r <= rtol:
                hist.converged = True
                break
            if not np.isfinite(r) or r > 1e6:
                hist.diverged = True
                break
    hist.solution = x
    return hist


def volume_operator(ctx: LinearSchwarzContext):
    """x -> M^{-1} A x."""
    return lambda x: apply_M_inv(ctx, ctx.A @ x)


def substructured_operator(ctx: LinearSchwarzContext):
    """v -> R-bar M^{-1} A P-bar v."""
    sk = ctx.skeleton
    return lambda v: sk.restrict(apply_M_inv(ctx, ctx.A @ sk.extend(v)))


def gmres_ras(ctx: LinearSchwarzContext, u0=None, rtol: float = 1e-8, maxit: int | None = None,
              **kwargs) -> tuple[np.ndarray, GmresResult]:
    b = apply_M_inv(ctx, ctx.f)
    res = gmres(volume_operator(ctx), b, u0, rtol=rtol, maxit=maxit, **kwargs)
    return res.x, res


def gmres_sras(ctx: LinearSchwarzContext, v0=None, rtol: float = 1e-8, maxit: int | None = None,
               **kwargs) -> tuple[np.ndarray, GmresResult]:
    sk = ctx.skeleton
    b = sk.restrict(apply_M_inv(ctx, ctx.f))
    res = gmres(substructured_operator(ctx), b, v0, rtol=rtol, maxit=maxit, **kwargs)
    return res.x, res


def gmres_history(method: str, result: GmresResult, n_subdomains: int) -> ConvergenceHistory:
    """ConvergenceHistory view of a GMRES run: one parallel round per iteration plus the rhs round."""
    hist = ConvergenceHistory(method)
    r0 = result.residual_history[0]
    per_vector = result.stored_basis_bytes // (result.iterations + 1)
    for k, r in enumerate(result.residual_history):
        hist.record(err=None, res=_rel(r, r0), basis_bytes=per_vector * (k + 1))
        hist.cum_solves[-1] = n_subdomains * (k + 1)
        hist.cum_parallel_rounds[-1] = k + 1
    hist.converged = result.converged
    hist.solution = result.x
    return hist


@dataclass
class KrylovReport:
    k: int
    assumption_error: float
    identity_errors: list[float]
    volume_rank: int
    substructured_rank: int
    joint_rank: int
    ok: bool
    offending_vector: np.ndarray | None = field(default=None, repr=False)


def check_krylov_restriction(ctx: LinearSchwarzContext, u0=None, k: int = 1, tol: float = 1e-10,
                             rng: np.random.Generator | None = None) -> KrylovReport:
    """Check R-bar (M^{-1}A)^i = (R-bar M^{-1} A P-bar)^i R-bar for i <= k on a random vector,
    and that R-bar K_k(M^{-1}A, r0) and K_k(R-bar M^{-1}A P-bar, R-bar r0) span the same space."""
    rng = np.random.default_rng(0) if rng is None else rng
    sk = ctx.skeleton
    vol = volume_operator(ctx)
    sub = substructured_operator(ctx)
    u0 = np.zeros(ctx.n) if u0 is None else np.asarray(u0, dtype=float)

    w = rng.standard_normal(ctx.n)
    lhs_1 = sk.restrict(vol(w))
    rhs_1 = sk.restrict(vol(sk.extend(sk.restrict(w))))
    assumption_error = np.linalg.norm(lhs_1 - rhs_1) / max(np.linalg.norm(lhs_1), 1e-300)

    identity_errors = []
    a, b = w.copy(), sk.restrict(w)
    for _ in range(k):
        a, b = vol(a), sub(b)
        ra = sk.restrict(a)
        identity_errors.append(float(np.linalg.norm(ra - b) / max(np.linalg.norm(ra), 1e-300)))

    r0 = apply_M_inv(ctx, ctx.f - ctx.A @ u0)
    rbar0 = sk.restrict(apply_M_inv(ctx, ctx.f - ctx.A @ sk.extend(sk.restrict(u0))))
    vol_cols, sub_cols = [], []
    a, b = r0.copy(), rbar0.copy()
    for _ in range(k):
        vol_cols.append(sk.restrict(a) / max(np.linalg.norm(a), 1e-300))
        sub_cols.append(b / max(np.linalg.norm(b), 1e-300))
        a, b = vol(a), sub(b)
    if k:
        V, S = np.stack(vol_cols, axis=1), np.stack(sub_cols, axis=1)
        rv, rs, rj = numerical_rank(V, tol), numerical_rank(S, tol), numerical_rank(np.hstack([V, S]), tol)
    else:
        rv = rs = rj = 0
    ok = assumption_error <= tol and all(e <= tol for e in identity_errors) and rv == rs == rj
    return KrylovReport(k, float(assumption_error), identity_errors, rv, rs, rj, ok,
                        None if assumption_error <= tol else w)


def substructured_iterate_from_volume_basis(ctx: LinearSchwarzContext, result: GmresResult,
                                            v0: np.ndarray) -> np.ndarray:
    """Diagnostic: v0 + R-bar Q_k t with t minimising ||R-bar Q_{k+1}(||r0|| e1 - H_k t)||.

    ``result`` must come from ``gmres_ras(..., keep_basis=True)``; under the
    interface assumption this reproduces the k-th GMRES-SRAS iterate.
    """
    sk = ctx.skeleton
    Q, H = result.basis, result.hessenberg
    k = H.shape[1]
    beta = result.residual_history[0]
    RQ = Q[sk.indices]
    rhs = beta * RQ[:, 0]
    lhs = RQ[:, : H.shape[0]] @ H[: RQ[:, : H.shape[0]].shape[1]]
    t, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return v0 + RQ[:, :k] @ t
