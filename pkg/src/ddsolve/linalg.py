"""Sparse/dense kernels and an instrumented GMRES.

``CsrMatrix`` is scipy's CSR type; the GMRES here is written out by hand
because the Arnoldi quantities (basis, Hessenberg matrix, breakdown) are
part of what the library reports.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

CsrMatrix = sp.csr_matrix


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def csr_matvec(A, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: matrix has {A.shape[1]} columns, vector has {x.shape[0]} entries")
    return A @ x


class DenseLU:
    """Row-pivoted LU of a dense square matrix."""

    def __init__(self, a, pivot_tol: float = 1e-14):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        self.n = a.shape[0]
        self.lu, self.piv = sla.lu_factor(a, check_finite=True)
        row_scale = np.abs(a).max(axis=1) if self.n else np.zeros(0)
        # pivot i sits in row piv-permuted position; compare against the largest row scale
        diag = np.abs(np.diag(self.lu))
        scale = row_scale.max() if self.n else 0.0
        if self.n and (scale == 0.0 or diag.min() < pivot_tol * scale):
            raise SingularMatrixError(f"pivot {diag.min():.3e} below {pivot_tol:g} x row scale {scale:.3e}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        return sla.lu_solve((self.lu, self.piv), b)

    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (P, L, U) with ``P @ L @ U`` equal to the factored matrix."""
        L = np.tril(self.lu, -1) + np.eye(self.n)
        U = np.triu(self.lu)
        perm = np.arange(self.n)
        for i, p in enumerate(self.piv):
            perm[i], perm[p] = perm[p], perm[i]
        P = np.eye(self.n)[:, perm]
        return P, L, U


def lu_solve(factor, b: np.ndarray) -> np.ndarray:
    return factor.solve(b)


class SparseLU:
    """SuperLU factorization used for subdomain solves."""

    def __init__(self, a):
        a = sp.csc_matrix(a)
        self.n = a.shape[0]
        try:
            self._lu = spla.splu(a)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))


def factorize(a):
    if a.shape[0] == 0:
        return DenseLU(np.zeros((0, 0)))
    return SparseLU(a) if sp.issparse(a) else DenseLU(a)


def as_matvec(op) -> Callable[[np.ndarray], np.ndarray]:
    if callable(op):
        return op
    if hasattr(op, "matvec"):
        return op.matvec
    return lambda x: op @ x


@dataclass
class GmresResult:
    x: np.ndarray
    residual_history: list[float]
    iterations: int
    basis_dim: int
    breakdown: bool
    converged: bool
    stored_basis_bytes: int
    basis: np.ndarray | None = field(default=None, repr=False)
    hessenberg: np.ndarray | None = field(default=None, repr=False)
    arnoldi_error: float | None = None

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "basis_dim": self.basis_dim,
            "breakdown": self.breakdown,
            "converged": self.converged,
            "stored_basis_bytes": self.stored_basis_bytes,
            "residual_history": [float(r) for r in self.residual_history],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    r = np.hypot(a, b)
    return a / r, b / r


def gmres(op, b, x0=None, rtol: float = 1e-8, maxit: int | None = None,
          breakdown_tol: float = 1e-14, atol: float = 0.0,
          keep_basis: bool = False, check_arnoldi: bool = False,
          reorthogonalize: bool = True) -> GmresResult:
    """Unrestarted GMRES with modified Gram-Schmidt and Givens rotations.

    Stops at the first iterate with ``||b - op(x)|| <= max(rtol * ||r0||, atol)``,
    on a lucky breakdown (subdiagonal below ``breakdown_tol`` times the norm of
    the freshly applied vector), or after ``maxit`` iterations (flagged as not
    converged). With ``check_arnoldi`` the relation ``op Q_k = Q_{k+1} H_k`` is
    measured at every step and its worst relative violation reported.
    """
    matvec = as_matvec(op)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if maxit is None:
        maxit = max(n, 1)
    maxit = min(maxit, max(n, 1))

    r0 = b - matvec(x0) if n else b.copy()
    beta = float(np.linalg.norm(r0))
    history = [beta]
    target = max(rtol * beta, atol)
    if beta == 0.0 or beta <= target or n == 0:
        return GmresResult(x0, history, 0, 0, False, True, 8 * n,
                           np.zeros((n, 1)) if keep_basis else None,
                           np.zeros((1, 0)) if keep_basis else None)

    Q = [r0 / beta]
    H_cols: list[np.ndarray] = []  # column j has length j + 2
    R = np.zeros((0, 0))
    cs: list[float] = []
    sn: list[float] = []
    g = [beta]
    breakdown = False
    converged = False
    arnoldi_err = 0.0 if check_arnoldi else None
    k = 0
    for k in range(1, maxit + 1):
        j = k - 1
        w = np.array(matvec(Q[j]), dtype=float)  # copy: the operator may return its input
        wnorm = float(np.linalg.norm(w))
        h = np.zeros(k + 1)
        for i in range(k):
            h[i] = Q[i] @ w
            w -= h[i] * Q[i]
        if reorthogonalize:
            for i in range(k):
                c = Q[i] @ w
                h[i] += c
                w -= c * Q[i]
        h[k] = float(np.linalg.norm(w))
        H_cols.append(h)
        lucky = h[k] <= breakdown_tol * wnorm
        if not lucky:
            Q.append(w / h[k])
        if check_arnoldi:
            lhs = np.stack([matvec(Q[i]) for i in range(k)], axis=1)
            Qk = np.stack(Q[: k + 1], axis=1)
            rhs = Qk @ _hessenberg(H_cols)[: Qk.shape[1]]
            scale = max(np.linalg.norm(lhs), 1e-300)
            arnoldi_err = max(arnoldi_err, float(np.linalg.norm(lhs - rhs) / scale))

        col = h.copy()
        for i in range(j):
            col[i], col[i + 1] = cs[i] * col[i] + sn[i] * col[i + 1], -sn[i] * col[i] + cs[i] * col[i + 1]
        c, s = _givens(col[j], col[j + 1])
        cs.append(c)
        sn.append(s)
        col[j] = c * col[j] + s * col[j + 1]
        R_new = np.zeros((k, k))
        R_new[: k - 1, : k - 1] = R
        R_new[:, j] = col[:k]
        R = R_new
        g.append(-s * g[j])
        g[j] = c * g[j]
        history.append(abs(g[k]))
        if lucky:
            breakdown = True
            converged = True
            break
        if abs(g[k]) <= target:
            converged = True
            break

    y = sla.solve_triangular(R, np.asarray(g[:k])) if k else np.zeros(0)
    x = x0 + np.stack(Q[:k], axis=1) @ y
    return GmresResult(
        x=x,
        residual_history=history,
        iterations=k,
        basis_dim=len(Q),
        breakdown=breakdown,
        converged=converged,
        stored_basis_bytes=8 * n * (k + 1),
        basis=np.stack(Q, axis=1) if keep_basis else None,
        hessenberg=_hessenberg(H_cols) if keep_basis else None,
        arnoldi_error=arnoldi_err,
    )


def _hessenberg(cols: list[np.ndarray]) -> np.ndarray:
    k = len(cols)
    H = np.zeros((k + 1, k))
    for j, c in enumerate(cols):
        H[: j + 2, j] = c
    return H


def dense_operator(op, n: int) -> np.ndarray:
    """Assemble a matvec-only operator column by column."""
    matvec = as_matvec(op)
    out = np.zeros((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        out[:, i] = matvec(e)
        e[i] = 0.0
    return out


def numerical_rank(a: np.ndarray, rel_tol: float = 1e-10) -> int:
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
