"""Per-iteration records and their CSV/JSON forms."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class SolveCounter:
    """Counts subdomain solves; a parallel round is one batch of independent solves."""

    def __init__(self):
        self.solves = 0
        self.parallel_rounds = 0

    def add_round(self, n_solves: int) -> None:
        self.solves += n_solves
        self.parallel_rounds += 1

    def snapshot(self) -> tuple[int, int]:
        return self.solves, self.parallel_rounds

    def reset(self) -> None:
        self.solves = 0
        self.parallel_rounds = 0


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _to_csv(columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class ConvergenceHistory:
    """Stationary-iteration or GMRES history.

    ``err`` is relative to a reference solution when one is available,
    ``res`` is the relative (preconditioned) residual or fixed-point increment.
    """

    method: str
    err: list[float] = field(default_factory=list)
    res: list[float] = field(default_factory=list)
    cum_solves: list[int] = field(default_factory=list)
    cum_parallel_rounds: list[int] = field(default_factory=list)
    basis_bytes: list[int] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)
    solution: np.ndarray | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return max(len(self.err), len(self.res)) - 1

    def record(self, err=None, res=None, counter: SolveCounter | None = None, basis_bytes: int = 0):
        self.err.append(err)
        self.res.append(res)
        solves, rounds = counter.snapshot() if counter is not None else (0, 0)
        self.cum_solves.append(solves)
        self.cum_parallel_rounds.append(rounds)
        self.basis_bytes.append(basis_bytes)

    def to_csv(self) -> str:
        columns = ["iter", "err", "res", "cum_solves", "cum_parallel_rounds", "basis_bytes"]
        rows = [[i, self.err[i], self.res[i], self.cum_solves[i], self.cum_parallel_rounds[i], self.basis_bytes[i]]
                for i in range(len(self.err))]
        return _to_csv(columns, rows)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "iters": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
            "final_err": self.err[-1] if self.err else None,
            "final_res": self.res[-1] if self.res else None,
            "solves": self.cum_solves[-1] if self.cum_solves else 0,
            "parallel_rounds": self.cum_parallel_rounds[-1] if self.cum_parallel_rounds else 0,
            "bytes": max(self.basis_bytes) if self.basis_bytes else 0,
        }


@dataclass
class OuterNewtonHistory:
    """Outer Newton record; entry 0 is the initial guess.

    ``inner_gmres[k]`` is I(k), ``inner_newton[k]`` is L_in^k, the largest
    local Newton count of the residual evaluation used at outer step k.
    """

    method: str
    err: list[float] = field(default_factory=list)
    res: list[float] = field(default_factory=list)
    inner_gmres: list[int] = field(default_factory=list)
    inner_newton: list[int] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    coarse_newton: list[int] = field(default_factory=list)
    basis_bytes: list[int] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)
    volume_iterates: list[np.ndarray] = field(default_factory=list, repr=False)
    solution: np.ndarray | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.err) - 1

    @property
    def cost(self) -> list[int]:
        """L(n) = sum_{k<=n} (L_in^k + I(k)), with L(0) = 0."""
        return [int(v) for v in np.cumsum([0] + [a + b for a, b in zip(self.inner_newton[1:], self.inner_gmres[1:])])]

    def average_inner_gmres(self) -> float:
        its = self.inner_gmres[1:]
        return float(np.mean(its)) if its else 0.0

    def to_csv(self) -> str:
        columns = ["iter", "err", "res", "I(k)", "L_in^k", "L(n)", "wall_ms"]
        with_coarse = any(c for c in self.coarse_newton)
        if with_coarse:
            columns.append("coarse_newton_iters")
        cost = self.cost
        rows = []
        for i in range(len(self.err)):
            row = [i, self.err[i], self.res[i], self.inner_gmres[i], self.inner_newton[i], cost[i], self.wall_ms[i]]
            if with_coarse:
                row.append(self.coarse_newton[i])
            rows.append(row)
        return _to_csv(columns, rows)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "iters": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
            "final_err": self.err[-1] if self.err else None,
            "final_res": self.res[-1] if self.res else None,
            "L_final": self.cost[-1] if self.err else 0,
            "avg_inner_gmres": self.average_inner_gmres(),
            "bytes": max(self.basis_bytes) if self.basis_bytes else 0,
        }
