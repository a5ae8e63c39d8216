"""Two-level methods with FAS coarse corrections (nonlinear diffusion, overlap 4h)."""
from ddsolve.decomp import partition_overlapping
from ddsolve.nonlinear_schwarz import NonlinearSchwarzContext, iterate_nonlinear, reference_solution
from ddsolve.problems import NonlinearDiffusionProblem
from ddsolve.two_level import (build_substructured_coarse, build_volume_coarse, iterate_two_level,
                               newton_two_level)

prob = NonlinearDiffusionProblem(83)
ustar = reference_solution(prob)

for counts in ([2, 2], [4, 4]):
    ctx = NonlinearSchwarzContext(prob, partition_overlapping(prob.grid, counts, 2))
    vol = build_volume_coarse(prob.grid)
    sub = build_substructured_coarse(ctx.skeleton, prob.grid)
    print(f"\n{counts[0] * counts[1]} subdomains: coarse sizes {vol.dim} (volume) and {sub.dim} (skeleton)")
    one = iterate_nonlinear(ctx, "NRAS", rtol=1e-10, maxit=40, reference=ustar)
    print(f"  one-level NRAS : {one.iterations} sweeps, final err {one.err[-1]:.1e}")
    for name, coarse in (("NRAS_2L", vol), ("NSRAS_2L", sub)):
        h = iterate_two_level(ctx, coarse, name, rtol=1e-10, reference=ustar)
        print(f"  {name:14s}: {h.iterations} sweeps, final err {h.err[-1]:.1e}")
    for name, coarse in (("RASPEN_2L", vol), ("SRASPEN_2L", sub)):
        h = newton_two_level(ctx, coarse, name, reference=ustar)
        print(f"  {name:14s}: {h.iterations} Newton steps, avg GMRES {h.average_inner_gmres():.1f}")
