"""Experiment runner: config file in, one CSV per method plus summary.json out."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .decomp import decomposition_summary, partition_overlapping
from .history import ConvergenceHistory, OuterNewtonHistory
from .linear_schwarz import (LinearSchwarzContext, gmres_history, gmres_ras, gmres_sras, harmonic_extension,
                             solve_stationary)
from .nonlinear_schwarz import NonlinearSchwarzContext, iterate_nonlinear, newton_outer, reference_solution
from .problems import LinearProblem, ProblemSpec
from .two_level import (build_substructured_coarse, build_volume_coarse, iterate_two_level, newton_two_level,
                        TwoLevelSettings)

log = logging.getLogger(__name__)

LINEAR_METHODS = ("RAS", "SRAS", "GMRES_RAS", "GMRES_SRAS")
NONLINEAR_METHODS = ("NRAS", "NSRAS", "PLAIN_NEWTON", "RASPEN", "SRASPEN")
TWO_LEVEL_METHODS = ("NRAS_2L", "NSRAS_2L", "RASPEN_2L", "SRASPEN_2L")
METHOD_IDS = LINEAR_METHODS + NONLINEAR_METHODS + TWO_LEVEL_METHODS

DEFAULT_TOLERANCES = {
    "rtol": 1e-10,  # stationary sweeps and GMRES on the linear systems
    "outer_rtol": 1e-12,  # outer Newton
    "inner_rtol": 1e-12,  # GMRES on Jacobian systems and local Newton
    "maxit": 200,
    "outer_maxit": 50,
    "max_inner": 50,
    "coarse_tol": 1e-12,
    "coarse_maxit": 50,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    methods: list[str]
    initial: dict = field(default_factory=lambda: {"value": 0.0})
    tolerances: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    name: str = "experiment"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "problem" not in d or "methods" not in d:
            raise ConfigError("config needs 'problem' and 'methods' entries")
        try:
            spec = ProblemSpec.from_dict(d["problem"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(f"bad problem entry: {exc}") from exc
        methods = [str(m).upper() for m in d["methods"]]
        unknown = [m for m in methods if m not in METHOD_IDS]
        if unknown:
            raise ConfigError(f"unknown method id(s) {', '.join(unknown)}; valid ids: {', '.join(METHOD_IDS)}")
        if spec.problem != "poisson":
            linear_only = [m for m in methods if m in LINEAR_METHODS]
            if linear_only:
                raise ConfigError(f"{', '.join(linear_only)} need a linear problem (poisson), got {spec.problem!r}")
        tol = dict(DEFAULT_TOLERANCES)
        extra = set(d.get("tolerances", {})) - set(tol)
        if extra:
            raise ConfigError(f"unknown tolerance key(s) {', '.join(sorted(extra))}; valid: {', '.join(tol)}")
        tol.update(d.get("tolerances", {}))
        return cls(spec, methods, dict(d.get("initial", {"value": 0.0})), tol, dict(d.get("options", {})),
                   str(d.get("name", "experiment")))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


@dataclass
class RunRecord:
    method: str
    history: ConvergenceHistory | OuterNewtonHistory = field(repr=False)
    wall_ms: float
    solves: int
    parallel_rounds: int
    basis_bytes: int
    final_error: float | None = None
    error: str | None = None  # exception message when the method failed

    def summary(self) -> dict:
        out = self.history.summary()
        if self.error is not None:
            out["error"] = self.error
        out.update({
            "wall_ms": self.wall_ms,
            "solves": self.solves,
            "parallel_rounds": self.parallel_rounds,
            "bytes": self.basis_bytes,
            "final_volume_error": self.final_error,
        })
        if isinstance(self.history, OuterNewtonHistory):
            out["cost_identity_ok"] = check_cost_identity(self.history)
        return out


def cost_metrics(history) -> dict:
    """L(n) series (outer Newton), parallel rounds and GMRES basis bytes."""
    if isinstance(history, OuterNewtonHistory):
        return {
            "L": history.cost,
            "parallel_rounds": history.cost[-1] if history.err else 0,
            "basis_bytes": max(history.basis_bytes, default=0),
        }
    return {
        "L": None,
        "parallel_rounds": history.cum_parallel_rounds[-1] if history.cum_parallel_rounds else 0,
        "basis_bytes": max(history.basis_bytes, default=0),
    }


def check_cost_identity(history: OuterNewtonHistory) -> bool:
    """L(n) = sum_{k=1}^n (L_in^k + I(k)) with L(0) = 0, exactly."""
    running, expected = 0, [0]
    for k in range(1, len(history.err)):
        running += history.inner_newton[k] + history.inner_gmres[k]
        expected.append(running)
    return history.cost == expected


def initial_vector(n: int, initial: dict, seed: int | None) -> np.ndarray:
    """Constant ``value`` plus optional Gaussian noise of size ``noise`` drawn from ``seed``."""
    u = np.full(n, float(initial.get("value", 0.0)))
    noise = float(initial.get("noise", 0.0))
    if noise:
        u += noise * np.random.default_rng(seed).standard_normal(n)
    return u


def _relative(a, b) -> float:
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (nb if nb > 0 else 1.0))


def run_method(method: str, problem, decomposition, u0: np.ndarray, reference: np.ndarray, tol: dict,
               options: dict, threads: int = 1, contexts: dict | None = None) -> RunRecord:
    contexts = {} if contexts is None else contexts
    t0 = time.perf_counter()
    if method in LINEAR_METHODS:
        ctx = contexts.get("linear")
        if ctx is None:
            ctx = contexts["linear"] = LinearSchwarzContext(problem.A, problem.f, decomposition, threads=threads)
        sk = ctx.skeleton
        ctx.counter.reset()
        if method in ("RAS", "SRAS"):
            x0 = sk.restrict(u0) if method == "SRAS" else u0
            hist = solve_stationary(ctx, method, x0, rtol=tol["rtol"], maxit=int(tol["maxit"]), reference=reference)
            x, nbytes = hist.solution, 0
        else:
            run = gmres_ras if method == "GMRES_RAS" else gmres_sras
            x, res = run(ctx, u0 if method == "GMRES_RAS" else sk.restrict(u0), rtol=tol["rtol"],
                         maxit=int(tol["maxit"]))
            hist = gmres_history(method, res, ctx.n_subdomains)
            nbytes = res.stored_basis_bytes
        solves, rounds = ctx.counter.snapshot()
        wall = (time.perf_counter() - t0) * 1e3
        # skeleton solutions are reported through their harmonic extension (not counted)
        vol = x if method in ("RAS", "GMRES_RAS") else harmonic_extension(ctx, x)
        return RunRecord(method, hist, wall, solves, rounds, nbytes, _relative(vol, reference))

    ctx = contexts.get("nonlinear")
    if ctx is None:
        ctx = contexts["nonlinear"] = NonlinearSchwarzContext(
            problem, decomposition, inner_rtol=tol["inner_rtol"], max_inner=int(tol["max_inner"]),
            warm_start=bool(options.get("warm_start", False)), threads=threads)
    sk = ctx.skeleton
    ctx.counter.reset()
    ctx.newton_counter.reset()
    settings = TwoLevelSettings(tol["coarse_tol"], int(tol["coarse_maxit"]))
    if method in ("NRAS", "NSRAS"):
        x0 = sk.restrict(u0) if method == "NSRAS" else u0
        hist = iterate_nonlinear(ctx, method, x0, rtol=tol["rtol"], maxit=int(tol["maxit"]), reference=reference)
    elif method in ("NRAS_2L", "NSRAS_2L"):
        sub = method == "NSRAS_2L"
        coarse = build_substructured_coarse(sk, decomposition.grid) if sub else build_volume_coarse(decomposition.grid)
        hist = iterate_two_level(ctx, coarse, method, sk.restrict(u0) if sub else u0, rtol=tol["rtol"],
                                 maxit=int(tol["maxit"]), reference=reference, settings=settings)
    elif method in ("RASPEN_2L", "SRASPEN_2L"):
        sub = method == "SRASPEN_2L"
        coarse = build_substructured_coarse(sk, decomposition.grid) if sub else build_volume_coarse(decomposition.grid)
        hist = newton_two_level(ctx, coarse, method, sk.restrict(u0) if sub else u0, outer_rtol=tol["outer_rtol"],
                                maxit=int(tol["outer_maxit"]), inner_rtol=tol["inner_rtol"], reference=reference,
                                settings=settings)
    else:
        x0 = sk.restrict(u0) if method == "SRASPEN" else u0
        hist = newton_outer(ctx, method, x0, outer_rtol=tol["outer_rtol"], maxit=int(tol["outer_maxit"]),
                            jacobian_solver=options.get("jacobian_solver"), inner_rtol=tol["inner_rtol"],
                            line_search=options.get("line_search"), reference=reference)
    wall = (time.perf_counter() - t0) * 1e3
    solves = ctx.counter.solves + ctx.newton_counter.solves
    rounds = ctx.counter.parallel_rounds + ctx.newton_counter.parallel_rounds
    nbytes = max(hist.basis_bytes, default=0)
    return RunRecord(method, hist, wall, solves, rounds, nbytes, _relative(hist.solution, reference))


def _reference(problem) -> np.ndarray:
    if isinstance(problem, LinearProblem):
        return spla.spsolve(problem.A.tocsc(), problem.f)
    return reference_solution(problem)


def run_experiment(config, out_dir=None, threads: int = 1, seed: int | None = 0,
                   timing: bool = True) -> list[RunRecord]:
    """Run every configured method; write ``<METHOD>.csv`` and ``summary.json`` into ``out_dir``.

    ``config`` is an :class:`ExperimentConfig`, a dict or a path to a JSON
    file. With ``timing=False`` the wall-clock columns are written as zero so
    repeated runs produce identical files.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config) if isinstance(config, dict) else ExperimentConfig.load(config)
    spec = config.problem
    problem, grid = spec.build()
    try:
        decomposition = partition_overlapping(grid, spec.counts_per_axis, spec.overlap_layers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    u0 = initial_vector(grid.n, config.initial, seed)
    reference = _reference(problem)
    contexts: dict = {}
    records = []
    for m in config.methods:
        t0 = time.perf_counter()
        try:
            rec = run_method(m, problem, decomposition, u0, reference, config.tolerances, config.options,
                             threads, contexts)
        except (RuntimeError, ArithmeticError, ValueError) as exc:
            log.warning("%s failed: %s", m, exc)
            hist = ConvergenceHistory(m)
            hist.diverged = True
            rec = RunRecord(m, hist, (time.perf_counter() - t0) * 1e3, 0, 0, 0, None, f"{type(exc).__name__}: {exc}")
        records.append(rec)
    if not timing:
        for rec in records:
            rec.wall_ms = 0.0
            if isinstance(rec.history, OuterNewtonHistory):
                rec.history.wall_ms = [0.0] * len(rec.history.wall_ms)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rec in records:
            (out / f"{rec.method}.csv").write_text(rec.history.to_csv())
        any_ctx = contexts.get("nonlinear") or contexts.get("linear")
        summary = {
            "name": config.name,
            "problem": json.loads(spec.to_json()),
            "seed": seed,
            "threads": threads,
            "decomposition": decomposition_summary(decomposition, any_ctx.skeleton if any_ctx else None),
            "runs": [rec.summary() for rec in records],
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return records


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
