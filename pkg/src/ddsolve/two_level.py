"""FAS coarse corrections in volume and substructured form, two-level
nonlinear RAS/SRAS sweeps and the two-level RASPEN/SRASPEN residuals.

Volume coarse space: every other grid point per axis, linear interpolation
P0 and full weighting R0 (the row-normalised transpose of P0).
Substructured coarse space: every other skeleton unknown along each
interface segment, with 1D linear interpolation along the segment.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomp import CartesianGrid, Skeleton
from .history import ConvergenceHistory, OuterNewtonHistory
from .linalg import gmres
from .nonlinear_schwarz import (LocalSolveError, NonlinearSchwarzContext, SubdomainStates, _assemble, _solve_all,
                                sraspen_jacobian_apply, sraspen_residual)

VOLUME = "VOLUME"
SUBSTRUCTURED = "SUBSTRUCTURED"


class CoarseSolveError(RuntimeError):
    pass


@dataclass
class CoarseSpace:
    """Coarse space with restriction (n_coarse x n_fine) and prolongation (n_fine x n_coarse).

    ``coarse_index`` lists the fine positions of the coarse unknowns (grid
    indices for VOLUME, skeleton positions for SUBSTRUCTURED), and
    ``injection`` picks them out, so ``injection @ prolongation`` is the identity.
    """

    kind: str
    restriction: sp.csr_matrix
    prolongation: sp.csr_matrix
    coarse_index: np.ndarray
    injection: sp.csr_matrix = field(repr=False)

    @property
    def dim(self) -> int:
        return self.prolongation.shape[1]

    @property
    def fine_dim(self) -> int:
        return self.prolongation.shape[0]

    def restrict(self, u: np.ndarray) -> np.ndarray:
        return self.restriction @ u

    def prolong(self, c: np.ndarray) -> np.ndarray:
        return self.prolongation @ c


def _row_normalized_transpose(P: sp.csr_matrix) -> sp.csr_matrix:
    R = sp.csr_matrix(P.T)
    sums = np.asarray(R.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / sums) @ R)


def _injection(n_fine: int, coarse_index: np.ndarray) -> sp.csr_matrix:
    m = coarse_index.size
    return sp.csr_matrix((np.ones(m), (np.arange(m), coarse_index)), shape=(m, n_fine))


def _interp_1d(n: int) -> sp.csr_matrix:
    """Linear interpolation from the odd points 1, 3, 5, ... of n points, zero Dirichlet ends."""
    m = n // 2
    rows, cols, vals = [], [], []
    for i in range(n):
        if i % 2 == 1:
            rows.append(i), cols.append((i - 1) // 2), vals.append(1.0)
            continue
        for c in ((i - 2) // 2, i // 2):  # coarse points at fine i - 1 and i + 1
            if 0 <= c < m:
                rows.append(i), cols.append(c), vals.append(0.5)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, m))
    P.sum_duplicates()
    return P


def build_volume_coarse(grid: CartesianGrid) -> CoarseSpace:
    """Every-other-point coarse grid with linear interpolation and full weighting."""
    if any(p < 3 for p in grid.points_per_axis):
        raise ValueError(f"volume coarse space needs at least 3 points per axis, got {grid.points_per_axis}")
    P = None
    index_1d = []
    for n in grid.points_per_axis:
        P1 = _interp_1d(n)
        index_1d.append(np.arange(1, n, 2))
        # x fastest: later axes go to the left of the Kronecker product
        P = P1 if P is None else sp.kron(P1, P, format="csr")
    P = sp.csr_matrix(P)
    mesh = np.meshgrid(*index_1d, indexing="ij")
    coarse_index = grid.ravel([m.ravel(order="F") for m in mesh])
    return CoarseSpace(VOLUME, _row_normalized_transpose(P), P, np.asarray(coarse_index), _injection(grid.n, coarse_index))


def interface_segments(skeleton: Skeleton, grid: CartesianGrid) -> list[np.ndarray]:
    """Runs of grid-adjacent skeleton unknowns along one grid line, as skeleton positions.

    In 1D the whole skeleton lies on one line and forms a single segment.
    Only runs of length >= 2 are returned.
    """
    K = skeleton.indices
    if K.size == 0:
        return []
    if grid.dim == 1:
        return [np.arange(K.size)]
    mi = grid.multi_indices[K]
    segments = []
    for axis in range(grid.dim):
        others = [a for a in range(grid.dim) if a != axis]
        keys = mi[:, others]
        order = np.lexsort(tuple([mi[:, axis]] + [keys[:, i] for i in range(keys.shape[1] - 1, -1, -1)]))
        start = 0
        for pos in range(1, order.size + 1):
            end = pos == order.size
            if not end:
                a, b = order[pos - 1], order[pos]
                same_line = np.array_equal(keys[a], keys[b]) and mi[b, axis] == mi[a, axis] + 1
            if end or not same_line:
                if pos - start >= 2:
                    segments.append(order[start:pos].copy())
                start = pos
    return segments


def build_substructured_coarse(skeleton: Skeleton, grid: CartesianGrid) -> CoarseSpace:
    """Every other skeleton unknown per interface segment, linear interpolation along segments.

    Cross points (unknowns on segments of two different axes) and unknowns on
    no segment are always coarse. A fine unknown after the last coarse point
    of its segment copies that point's value.
    """
    nb = skeleton.n_bar
    if nb == 0:
        raise ValueError("empty skeleton: no substructured coarse space")
    segments = interface_segments(skeleton, grid)
    membership = np.zeros(nb, dtype=int)
    for seg in segments:
        membership[seg] += 1
    coarse = membership != 1  # cross points and isolated unknowns
    for seg in segments:
        coarse[seg[::2]] = True
    coarse_index = np.flatnonzero(coarse)
    col_of = -np.ones(nb, dtype=int)
    col_of[coarse_index] = np.arange(coarse_index.size)

    coords = grid.coordinates()[skeleton.indices]
    rows, cols, vals = list(coarse_index), list(col_of[coarse_index]), [1.0] * coarse_index.size
    for seg in segments:
        kept = [p for p in range(seg.size) if coarse[seg[p]]]
        for p in range(seg.size):
            s = seg[p]
            if coarse[s]:
                continue
            left = max((q for q in kept if q < p), default=None)
            right = min((q for q in kept if q > p), default=None)
            if left is None or right is None:
                q = right if left is None else left
                rows.append(s), cols.append(col_of[seg[q]]), vals.append(1.0)
                continue
            # distance along the segment in physical coordinates
            xl, xr, xp = coords[seg[left]], coords[seg[right]], coords[s]
            t = np.linalg.norm(xp - xl) / np.linalg.norm(xr - xl)
            rows += [s, s]
            cols += [col_of[seg[left]], col_of[seg[right]]]
            vals += [1.0 - t, t]
    P = sp.csr_matrix((vals, (rows, cols)), shape=(nb, coarse_index.size))
    P.sum_duplicates()
    return CoarseSpace(SUBSTRUCTURED, _row_normalized_transpose(P), P, coarse_index, _injection(nb, coarse_index))


# ---------------------------------------------------------------------------
# coarse functions and FAS corrections


def coarse_function_F0(problem, coarse: CoarseSpace, u0: np.ndarray) -> np.ndarray:
    """F0(u0) = R0 F(P0 u0)."""
    return coarse.restriction @ problem.residual(coarse.prolongation @ u0)


def coarse_jacobian_J0(problem, coarse: CoarseSpace, u0: np.ndarray) -> sp.csr_matrix:
    """R0 J(P0 u0) P0 as a sparse triple product."""
    return sp.csr_matrix(coarse.restriction @ problem.jacobian(coarse.prolongation @ u0) @ coarse.prolongation)


def sub_coarse_function(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, v0: np.ndarray):
    """F-bar_0(v0) = R-bar_0 F-bar(P-bar_0 v0); returns (value, subdomain states at P-bar P-bar_0 v0)."""
    res, states = sraspen_residual(ctx, coarse.prolongation @ v0)
    return coarse.restriction @ res, states


def sub_coarse_jacobian(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, states: SubdomainStates) -> np.ndarray:
    """Dense R-bar_0 J_F-bar P-bar_0 by probing the exact matrix-free Jacobian, one round per column."""
    m = coarse.dim
    out = np.zeros((m, m))
    P = coarse.prolongation.tocsc()
    for i in range(m):
        col = P[:, i].toarray().ravel()
        out[:, i] = coarse.restriction @ sraspen_jacobian_apply(ctx, states, col)
    return out


@dataclass
class CoarseSolveReport:
    iterations: int
    residual_norm: float
    converged: bool


def _coarse_newton(fun, jac, y0, target, tol: float, maxit: int, jac0=None):
    """Newton for fun(y) = target; ``jac(y, aux)`` gives the Jacobian at y.

    ``fun`` returns (value, aux). With ``jac0`` given the iteration is a chord
    method using that fixed matrix. Steps that fail to reduce the residual
    are halved (at most 30 times).
    """
    y = y0.copy()
    val, aux = fun(y)
    r = val - target
    rn = np.linalg.norm(r)
    bound = tol * (1.0 + max(np.linalg.norm(target), rn))
    it = 0
    step_small = False
    at_floor = False  # last Newton correction at the size of roundoff in y
    while not at_floor and (rn > bound or not step_small) and it < maxit:
        J = jac0 if jac0 is not None else jac(y, aux)
        delta = spla.spsolve(sp.csc_matrix(J), -r) if sp.issparse(J) else np.linalg.solve(J, -r)
        it += 1
        dnorm = np.linalg.norm(delta, np.inf)
        scale = 1.0 + np.linalg.norm(y, np.inf)
        step = 1.0
        for _ in range(31):
            trial = y + step * delta
            try:
                val_t, aux_t = fun(trial)
                rn_t = np.linalg.norm(val_t - target)
            except (LocalSolveError, ValueError):
                rn_t = np.inf
            if rn_t < rn or (step == 1.0 and rn_t <= bound):
                break
            step *= 0.5
        else:
            if rn <= bound or dnorm <= 1e-12 * scale:
                break  # roundoff floor reached before the step test
            raise CoarseSolveError(f"coarse Newton stalled at residual {rn:.3e}")
        y, val, aux, rn = trial, val_t, aux_t, rn_t
        r = val - target
        step_small = step == 1.0 and dnorm <= 1e-10 * scale
        at_floor = step == 1.0 and dnorm <= 1e-14 * scale
    if rn > bound and not at_floor:
        raise CoarseSolveError(f"coarse Newton did not converge in {maxit} iterations (residual {rn:.3e})")
    return y, CoarseSolveReport(it, float(rn), True), aux


@dataclass
class TwoLevelSettings:
    coarse_tol: float = 1e-12
    coarse_maxit: int = 50


def fas_correction_volume(problem, coarse: CoarseSpace, u: np.ndarray, settings: TwoLevelSettings | None = None,
                          jac0=None):
    """C0(u) = y - R0 u with F0(y) = F0(R0 u) - R0 F(u); returns (C0, report, J0 at the solution)."""
    settings = settings or TwoLevelSettings()
    R0u = coarse.restriction @ u
    target = coarse_function_F0(problem, coarse, R0u) - coarse.restriction @ problem.residual(u)

    def fun(y):
        return coarse_function_F0(problem, coarse, y), None

    y, report, _ = _coarse_newton(fun, lambda y, aux: coarse_jacobian_J0(problem, coarse, y), R0u, target,
                                  settings.coarse_tol, settings.coarse_maxit, jac0)
    return y - R0u, report, (jac0 if jac0 is not None else coarse_jacobian_J0(problem, coarse, y))


def fas_correction_substructured(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, v: np.ndarray,
                                 settings: TwoLevelSettings | None = None, jac0=None, fine_residual=None):
    """C0^S(v) = y - R-bar_0 v with F-bar_0(y) = F-bar_0(R-bar_0 v) - R-bar_0 F-bar(v).

    Returns (C0^S, report, dense coarse Jacobian used last).
    ``fine_residual`` may pass a precomputed F-bar(v).
    """
    settings = settings or TwoLevelSettings()
    Rv = coarse.restriction @ v
    Fv = sraspen_residual(ctx, v)[0] if fine_residual is None else fine_residual
    target = sub_coarse_function(ctx, coarse, Rv)[0] - coarse.restriction @ Fv
    last = {}

    def jac(y, states):
        last["J"] = sub_coarse_jacobian(ctx, coarse, states)
        return last["J"]

    y, report, _ = _coarse_newton(lambda y: sub_coarse_function(ctx, coarse, y), jac, Rv, target,
                                  settings.coarse_tol, settings.coarse_maxit, jac0)
    return y - Rv, report, (jac0 if jac0 is not None else last.get("J"))


# ---------------------------------------------------------------------------
# two-level stationary iterations


def two_level_nras_step(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, u: np.ndarray,
                        settings: TwoLevelSettings | None = None):
    """Coarse FAS correction u + P0 C0(u), then one nonlinear RAS sweep. Returns (u_next, coarse report)."""
    c0, report, _ = fas_correction_volume(ctx.problem, coarse, u, settings)
    half = u + coarse.prolongation @ c0
    return _assemble(ctx, _solve_all(ctx, half)), report


def two_level_nsras_step(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, v: np.ndarray,
                         settings: TwoLevelSettings | None = None):
    """Substructured FAS correction v + P-bar_0 C0^S(v), then one nonlinear SRAS sweep.

    Returns (v_next, coarse report, volume field of the sweep).
    """
    c0, report, _ = fas_correction_substructured(ctx, coarse, v, settings)
    half = v + coarse.prolongation @ c0
    volume = _assemble(ctx, _solve_all(ctx, ctx.skeleton.extend(half)))
    return ctx.skeleton.restrict(volume), report, volume


def iterate_two_level(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, variant: str = "NRAS_2L", x0=None,
                      rtol: float = 1e-10, maxit: int = 200, reference: np.ndarray | None = None,
                      settings: TwoLevelSettings | None = None) -> ConvergenceHistory:
    """Run two-level nonlinear RAS (NRAS_2L, volume) or its skeleton form (NSRAS_2L).

    ``err`` is the relative volume error of the sweep output; without a
    reference the relative increment is used for stopping.
    """
    variant = variant.upper()
    if variant not in ("NRAS_2L", "NSRAS_2L"):
        raise ValueError(f"unknown variant {variant!r}; expected 'NRAS_2L' or 'NSRAS_2L'")
    sub = variant == "NSRAS_2L"
    if coarse.kind != (SUBSTRUCTURED if sub else VOLUME):
        raise ValueError(f"{variant} needs a {'substructured' if sub else 'volume'} coarse space")
    sk = ctx.skeleton
    x = np.zeros(sk.n_bar if sub else ctx.n) if x0 is None else np.array(x0, dtype=float)
    ref_norm = np.linalg.norm(reference) if reference is not None else 0.0

    def rel(y):
        return float(np.linalg.norm(y - reference) / (ref_norm if ref_norm > 0 else 1.0))

    ctx.newton_counter.reset()
    hist = ConvergenceHistory(variant)
    volume = sk.extend(x) if sub else x
    hist.record(err=rel(volume) if reference is not None else None, res=None, counter=ctx.newton_counter)
    inc0 = None
    for _ in range(maxit):
        if sub:
            x_new, _, volume = two_level_nsras_step(ctx, coarse, x, settings)
        else:
            x_new, _ = two_level_nras_step(ctx, coarse, x, settings)
            volume = x_new
        inc = float(np.linalg.norm(x_new - x))
        inc0 = inc if inc0 is None else inc0
        x = x_new
        e = rel(volume) if reference is not None else None
        r = inc / inc0 if inc0 > 0 else 0.0
        hist.record(err=e, res=r, counter=ctx.newton_counter)
        crit = e if e is not None else r
        if crit <= rtol:
            hist.converged = True
            break
        if not np.isfinite(crit):
            hist.diverged = True
            break
    hist.solution = volume
    return hist


# ---------------------------------------------------------------------------
# two-level RASPEN / SRASPEN


@dataclass
class TwoLevelState:
    """Everything computed during one two-level residual evaluation."""

    point: np.ndarray
    correction: np.ndarray
    coarse_report: CoarseSolveReport
    coarse_jacobian: object = field(repr=False)
    states: SubdomainStates = field(repr=False)
    volume: np.ndarray = field(repr=False)


def two_level_raspen_residual(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, u: np.ndarray,
                              settings: TwoLevelSettings | None = None, base: TwoLevelState | None = None):
    """F_2L(u) = u - sum_j P~_j G_j(u + P0 C0(u)); returns (residual, TwoLevelState).

    With ``base`` the coarse solve is a chord iteration on the base coarse
    Jacobian and the local solves start from the base local solutions.
    """
    u = np.asarray(u, dtype=float)
    c0, report, J0 = fas_correction_volume(ctx.problem, coarse, u, settings,
                                           jac0=None if base is None else base.coarse_jacobian)
    half = u + coarse.prolongation @ c0
    states = _solve_all(ctx, half, None if base is None else base.states.local)
    volume = _assemble(ctx, states)
    return u - volume, TwoLevelState(u.copy(), c0, report, J0, states, volume)


def two_level_raspen_residual_c_form(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, u: np.ndarray,
                                     settings: TwoLevelSettings | None = None) -> np.ndarray:
    """-P0 C0(u) - sum_j P~_j C_j(u + P0 C0(u)) with C_j(w) = G_j(w) - R_j w."""
    tr = ctx.transfer
    c0, _, _ = fas_correction_volume(ctx.problem, coarse, u, settings)
    shift = coarse.prolongation @ c0
    half = u + shift
    states = _solve_all(ctx, half)
    out = -shift
    for j in range(ctx.n_subdomains):
        tr.prolong_owned(j, -(states.local[j] - half[tr.indices[j]]), out)
    return out


def two_level_sraspen_residual(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, v: np.ndarray,
                               settings: TwoLevelSettings | None = None, base: TwoLevelState | None = None):
    """F-bar_2L(v) = v - sum_j G-bar_j(v + P-bar_0 C0^S(v)), G-bar_j(v) = R-bar P~_j G_j(P-bar v)."""
    sk = ctx.skeleton
    v = np.asarray(v, dtype=float)
    c0, report, J0 = fas_correction_substructured(ctx, coarse, v, settings,
                                                  jac0=None if base is None else base.coarse_jacobian)
    half = v + coarse.prolongation @ c0
    states = _solve_all(ctx, sk.extend(half), None if base is None else base.states.local)
    volume = _assemble(ctx, states)
    return v - sk.restrict(volume), TwoLevelState(v.copy(), c0, report, J0, states, volume)


def two_level_sraspen_residual_c_form(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, v: np.ndarray,
                                      settings: TwoLevelSettings | None = None) -> np.ndarray:
    """-P-bar_0 C0^S(v) - sum_j C-bar_j(v + P-bar_0 C0^S(v)), C-bar_j(w) = G-bar_j(w) - R-bar P~_j R_j P-bar w."""
    sk, tr = ctx.skeleton, ctx.transfer
    c0, _, _ = fas_correction_substructured(ctx, coarse, v, settings)
    shift = coarse.prolongation @ c0
    half = v + shift
    ext = sk.extend(half)
    states = _solve_all(ctx, ext)
    out = -shift
    for j in range(ctx.n_subdomains):
        local = np.zeros(ctx.n)
        tr.prolong_owned(j, states.local[j] - ext[tr.indices[j]], local)
        out = out - sk.restrict(local)
    return out


TWO_LEVEL_METHODS = ("RASPEN_2L", "SRASPEN_2L")


def newton_two_level(ctx: NonlinearSchwarzContext, coarse: CoarseSpace, method: str = "RASPEN_2L", x0=None,
                     outer_rtol: float = 1e-12, maxit: int = 50, inner_rtol: float = 1e-12,
                     reference: np.ndarray | None = None, stop_on: str = "error",
                     settings: TwoLevelSettings | None = None, fd_step: float = 1e-7) -> OuterNewtonHistory:
    """Newton on the two-level RASPEN or SRASPEN residual.

    Jacobian-vector products are one-sided finite differences with step
    ``fd_step * (1 + ||x||_inf)`` along the unit direction. Undamped, with
    step halving only when an evaluation fails. ``I(k)`` counts GMRES
    iterations; ``coarse_newton`` the coarse Newton iterations of the
    residual evaluation at the new iterate.
    """
    method = method.upper()
    if method not in TWO_LEVEL_METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(TWO_LEVEL_METHODS)}")
    sub = method == "SRASPEN_2L"
    if coarse.kind != (SUBSTRUCTURED if sub else VOLUME):
        raise ValueError(f"{method} needs a {'substructured' if sub else 'volume'} coarse space")
    residual = two_level_sraspen_residual if sub else two_level_raspen_residual
    sk = ctx.skeleton
    x = np.zeros(sk.n_bar if sub else ctx.n) if x0 is None else np.array(x0, dtype=float)
    ref_norm = np.linalg.norm(reference) if reference is not None else None

    def rel_err(vol):
        if reference is None:
            return None
        return float(np.linalg.norm(vol - reference) / (ref_norm if ref_norm > 0 else 1.0))

    hist = OuterNewtonHistory(method)
    t0 = time.perf_counter()
    res, state = residual(ctx, coarse, x, settings)
    res_norm = np.linalg.norm(res)
    res0 = res_norm if res_norm > 0 else 1.0

    def record(its, l_in, nbytes):
        hist.iterates.append(x.copy())
        hist.volume_iterates.append(state.volume.copy())
        hist.err.append(rel_err(state.volume))
        hist.res.append(float(res_norm / res0))
        hist.inner_gmres.append(int(its))
        hist.inner_newton.append(int(l_in))
        hist.coarse_newton.append(int(state.coarse_report.iterations))
        hist.basis_bytes.append(int(nbytes))
        hist.wall_ms.append((time.perf_counter() - t0) * 1e3)

    def done():
        if stop_on == "error" and reference is not None:
            return hist.err[-1] <= outer_rtol
        return hist.res[-1] <= outer_rtol

    record(0, 0, 0)
    hist.inner_newton[0] = 0
    hist.converged = done()
    for _ in range(maxit):
        if hist.converged:
            break
        l_in = state.states.max_inner_iterations
        base, base_res = state, res
        eps = fd_step * (1.0 + np.linalg.norm(x, np.inf))

        def jv(w, base=base, base_res=base_res, eps=eps):
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return np.zeros_like(w)
            shifted, _ = residual(ctx, coarse, base.point + (eps / nw) * w, settings, base=base)
            return (shifted - base_res) * (nw / eps)

        g = gmres(jv, -res, rtol=inner_rtol, maxit=len(x))
        delta = g.x
        step = 1.0
        for _ in range(31):
            try:
                res_t, state_t = residual(ctx, coarse, x + step * delta, settings)
                if np.all(np.isfinite(res_t)):
                    break
            except (LocalSolveError, CoarseSolveError, ValueError):
                pass
            step *= 0.5
        else:
            hist.diverged = True
            break
        x = x + step * delta
        res, state = res_t, state_t
        res_norm = np.linalg.norm(res)
        record(g.iterations, l_in, g.stored_basis_bytes)
        if done():
            hist.converged = True
    hist.solution = hist.volume_iterates[-1]
    return hist


__all__ = [
    "CoarseSpace", "CoarseSolveError", "CoarseSolveReport", "TwoLevelSettings", "TwoLevelState",
    "VOLUME", "SUBSTRUCTURED", "TWO_LEVEL_METHODS",
    "build_volume_coarse", "build_substructured_coarse", "interface_segments",
    "coarse_function_F0", "coarse_jacobian_J0", "sub_coarse_function", "sub_coarse_jacobian",
    "fas_correction_volume", "fas_correction_substructured",
    "two_level_nras_step", "two_level_nsras_step", "iterate_two_level",
    "two_level_raspen_residual", "two_level_raspen_residual_c_form",
    "two_level_sraspen_residual", "two_level_sraspen_residual_c_form", "newton_two_level",
]
