"""RASPEN and SRASPEN on the 1D Forchheimer problem (h = 1e-3, overlap 8h).

Prints the error history against the cost measure L(n) and the average
number of GMRES iterations per Newton step for 20 and 50 subdomains.
"""
import numpy as np

from ddsolve.decomp import partition_overlapping
from ddsolve.nonlinear_schwarz import NonlinearSchwarzContext, newton_outer, reference_solution
from ddsolve.problems import ForchheimerProblem

prob = ForchheimerProblem(999)
ustar = reference_solution(prob)

for parts in (20, 50):
    ctx = NonlinearSchwarzContext(prob, partition_overlapping(prob.grid, [parts], 4), max_inner=500)
    print(f"\n{parts} subdomains, N-bar = {ctx.skeleton.n_bar}")
    runs = {m: newton_outer(ctx, m, reference=ustar) for m in ("RASPEN", "SRASPEN")}
    for method, hist in runs.items():
        print(f"  {method:8s} avg GMRES {hist.average_inner_gmres():6.2f}")
        for k, (e, L) in enumerate(zip(hist.err, hist.cost)):
            print(f"    it {k:2d}  L(n) = {L:5d}  err = {e:.2e}")
    sk = ctx.skeleton
    gap = max(np.abs(sk.restrict(u) - v).max() for u, v in zip(runs["RASPEN"].iterates, runs["SRASPEN"].iterates))
    print(f"  largest |R-bar u^n - v^n| along the Newton iterates: {gap:.1e}")
