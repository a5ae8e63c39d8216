"""Nonlinear diffusion from a far-away initial guess (u0 = 1e5).

Preconditioned Newton (RASPEN, SRASPEN) converges in a handful of steps
while plain Newton with full steps needs many more.
"""
import numpy as np

from ddsolve.decomp import partition_overlapping
from ddsolve.nonlinear_schwarz import NonlinearSchwarzContext, newton_outer, reference_solution
from ddsolve.problems import NonlinearDiffusionProblem

prob = NonlinearDiffusionProblem(83)
ustar = reference_solution(prob)
print(f"discretization error against sin(pi x) sin(pi y): {np.abs(ustar - prob.exact).max():.2e}")
u0 = np.full(prob.n, 1e5)

for counts in ([2, 2], [5, 5]):
    ctx = NonlinearSchwarzContext(prob, partition_overlapping(prob.grid, counts, 4))
    sk = ctx.skeleton
    print(f"\n{counts[0] * counts[1]} subdomains, N-bar = {sk.n_bar}")
    for method, x0 in (("RASPEN", u0), ("SRASPEN", sk.restrict(u0)), ("PLAIN_NEWTON", u0)):
        h = newton_outer(ctx, method, x0, reference=ustar, line_search=False)
        errs = " ".join(f"{e:.0e}" for e in h.err)
        print(f"  {method:12s} {h.iterations:2d} its, avg inner {h.average_inner_gmres():5.2f}: {errs}")
