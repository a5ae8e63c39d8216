"""Model problems: Poisson, 1D Forchheimer (finite volume), 2D nonlinear diffusion."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .decomp import CartesianGrid, build_grid


def laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


def assemble_poisson(grid: CartesianGrid, f=1.0) -> tuple[sp.csr_matrix, np.ndarray]:
    """Standard (2 dim + 1)-point Laplacian with homogeneous Dirichlet data."""
    A = None
    for axis, n in enumerate(grid.points_per_axis):
        term = laplacian_1d(n, grid.h)
        # x is the fastest index, so axis 0 is the rightmost Kronecker factor
        for other, m in enumerate(grid.points_per_axis):
            if other < axis:
                term = sp.kron(term, sp.identity(m), format="csr")
            elif other > axis:
                term = sp.kron(sp.identity(m), term, format="csr")
        A = term if A is None else A + term
    A = sp.csr_matrix(A)
    A.sort_indices()
    if callable(f):
        rhs = np.asarray(f(grid.coordinates()), dtype=float)
    else:
        rhs = np.full(grid.n, float(f))
    return A, rhs


class LinearProblem:
    """F(u) = A u - f."""

    def __init__(self, A, f):
        self.A = sp.csr_matrix(A)
        self.f = np.asarray(f, dtype=float)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def residual(self, u):
        return self.A @ u - self.f

    def jacobian(self, u):
        return self.A

    def sparsity(self):
        return self.A


def _check_finite(u):
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite entries in the state vector")


def forchheimer_q(y, gamma: float):
    """sign(y) (sqrt(1 + 4 gamma |y|) - 1) / (2 gamma), written to stay accurate for small gamma |y|."""
    a = np.abs(y)
    return np.sign(y) * 2.0 * a / (1.0 + np.sqrt(1.0 + 4.0 * gamma * a))


def forchheimer_dq(y, gamma: float):
    return 1.0 / np.sqrt(1.0 + 4.0 * gamma * np.abs(y))


class ForchheimerProblem:
    """Vertex-centred finite volumes for (q(-lambda u'))' = f on (0, 1).

    Unknowns sit at x_i = (i + 1) h, i = 0..n-1, with h = 1 / (n + 1); the
    boundary values enter as the neighbours of the first and last unknown.
    Face permeabilities are arithmetic means of lambda at adjacent points.
    """

    def __init__(self, n: int = 999, gamma: float = 1.0, u_left: float = 1.0, u_right: float = np.e,
                 permeability=None, forcing=None):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.grid = build_grid(1, [n], 1.0 / (n + 1))
        self.gamma = gamma
        self.u_left = u_left
        self.u_right = u_right
        lam = permeability or (lambda x: 2.0 + np.cos(5 * np.pi * x))
        frc = forcing or (lambda x: 50.0 * np.sin(5 * np.pi * x) * np.exp(x))
        h = self.grid.h
        xs = np.arange(n + 2) * h  # includes both boundary points
        lam_pts = lam(xs)
        if np.any(lam_pts <= 0):
            raise ValueError("permeability must be positive")
        self.face_lambda = 0.5 * (lam_pts[:-1] + lam_pts[1:])  # n + 1 faces
        self.rhs = frc(xs[1:-1])
        # fixed tridiagonal CSR pattern; jacobian() only refills the data array
        self._pattern = sp.diags([np.ones(n - 1), np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr")
        self._pattern.sort_indices()
        rows = np.repeat(np.arange(n), np.diff(self._pattern.indptr))
        self._offset = self._pattern.indices - rows  # -1, 0 or +1 per stored entry
        self._rows = rows

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def h(self) -> float:
        return self.grid.h

    def _padded(self, u):
        _check_finite(u)
        return np.concatenate([[self.u_left], u, [self.u_right]])

    def _face_arg(self, u):
        up = self._padded(u)
        return -self.face_lambda * np.diff(up) / self.h

    def residual(self, u):
        flux = forchheimer_q(self._face_arg(u), self.gamma)
        return np.diff(flux) / self.h - self.rhs

    def jacobian(self, u):
        y = self._face_arg(u)
        c = forchheimer_dq(y, self.gamma) * self.face_lambda / self.h**2  # per face
        rows, off = self._rows, self._offset
        # entry (i, i-1) uses face i, (i, i+1) face i+1, the diagonal both
        data = np.where(off == 0, c[rows] + c[rows + 1], -c[rows + (off > 0)])
        return sp.csr_matrix((data, self._pattern.indices, self._pattern.indptr), shape=(self.n, self.n))

    def sparsity(self):
        return self.jacobian(np.zeros(self.n))


def _exact_sinsin(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _forcing_sinsin(x, y):
    u = _exact_sinsin(x, y)
    grad2 = np.pi**2 * (np.cos(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2
                        + np.sin(np.pi * x) ** 2 * np.cos(np.pi * y) ** 2)
    # -div((1 + u^2) grad u) = -(1 + u^2) lap u - 2 u |grad u|^2, lap u = -2 pi^2 u
    return (1 + u**2) * 2 * np.pi**2 * u - 2 * u * grad2


class NonlinearDiffusionProblem:
    """-div((1 + u^2) grad u) = f on the unit square, 5-point conservative differences.

    The face coefficient is the mean of (1 + u^2) at the two adjacent points.
    f and the Dirichlet data come from the manufactured solution sin(pi x) sin(pi y).
    """

    def __init__(self, n: int = 83, exact=_exact_sinsin, forcing=_forcing_sinsin):
        self.grid = build_grid(2, [n, n], 1.0 / (n + 1))
        self.exact_fn = exact
        h = self.grid.h
        s = np.arange(n + 2) * h
        X, Y = np.meshgrid(s, s, indexing="xy")  # X[iy, ix]
        self._boundary = exact(X, Y)
        self._boundary[1:-1, 1:-1] = 0.0
        Xi, Yi = X[1:-1, 1:-1], Y[1:-1, 1:-1]
        self.rhs = forcing(Xi, Yi).ravel()  # row-major over (iy, ix) == x fastest
        self.exact = exact(Xi, Yi).ravel()

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def h(self) -> float:
        return self.grid.h

    def _padded(self, u):
        _check_finite(u)
        m = self.grid.points_per_axis[0]
        U = self._boundary.copy()
        U[1:-1, 1:-1] = u.reshape(m, m)
        return U

    def residual(self, u):
        U = self._padded(u)
        k = 1.0 + U**2
        kx = 0.5 * (k[1:-1, 1:] + k[1:-1, :-1])  # faces between x-neighbours, shape (m, m+1)
        ky = 0.5 * (k[1:, 1:-1] + k[:-1, 1:-1])  # (m+1, m)
        fx = kx * np.diff(U[1:-1, :], axis=1)
        fy = ky * np.diff(U[:, 1:-1], axis=0)
        div = np.diff(fx, axis=1) + np.diff(fy, axis=0)
        return (-div / self.h**2).ravel() - self.rhs

    def jacobian(self, u):
        m = self.grid.points_per_axis[0]
        U = self._padded(u)
        k = 1.0 + U**2
        h2 = self.h**2
        idx = np.full((m + 2, m + 2), -1, dtype=np.int64)
        idx[1:-1, 1:-1] = np.arange(m * m).reshape(m, m)
        rows, cols, vals = [], [], []
        # each face between P (centre) and Q contributes -k_f (U_Q - U_P) / h^2 to row P
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            P = (slice(1, -1), slice(1, -1))
            Q = (slice(1 + dy, m + 1 + dy), slice(1 + dx, m + 1 + dx))
            kf = 0.5 * (k[P] + k[Q])
            diff = U[Q] - U[P]
            # d/dU_P of -kf*diff: kf - U_P*diff ; d/dU_Q: -kf - U_Q*diff
            dP = (kf - U[P] * diff) / h2
            dQ = (-kf - U[Q] * diff) / h2
            rP = idx[P].ravel()
            rows.append(rP)
            cols.append(rP)
            vals.append(dP.ravel())
            cQ = idx[Q].ravel()
            inside = cQ >= 0
            rows.append(rP[inside])
            cols.append(cQ[inside])
            vals.append(dQ.ravel()[inside])
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m))
        J.sum_duplicates()
        J.sort_indices()
        return J

    def sparsity(self):
        return self.jacobian(np.zeros(self.n))


PROBLEM_IDS = ("poisson", "forchheimer", "nldiffusion")


@dataclass
class ProblemSpec:
    """Serializable description of a model problem and its decomposition."""

    problem: str
    points_per_axis: list[int]
    counts_per_axis: list[int]
    overlap_layers: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEM_IDS:
            raise ValueError(f"unknown problem {self.problem!r}; valid ids: {', '.join(PROBLEM_IDS)}")
        self.points_per_axis = [int(p) for p in self.points_per_axis]
        self.counts_per_axis = [int(c) for c in self.counts_per_axis]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        return cls(**json.loads(text))

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        return cls(**d)

    def build(self):
        """Return (problem, grid): a NonlinearProblem-like object and its grid."""
        p = self.params
        if self.problem == "poisson":
            dim = len(self.points_per_axis)
            h = p.get("h", 1.0 / (self.points_per_axis[0] + 1))
            grid = build_grid(dim, self.points_per_axis, h)
            A, f = assemble_poisson(grid, p.get("f", 1.0))
            return LinearProblem(A, f), grid
        if self.problem == "forchheimer":
            prob = ForchheimerProblem(self.points_per_axis[0], gamma=p.get("gamma", 1.0),
                                      u_left=p.get("u_left", 1.0), u_right=p.get("u_right", float(np.e)))
            return prob, prob.grid
        prob = NonlinearDiffusionProblem(self.points_per_axis[0])
        return prob, prob.grid
