"""Warm-starting the interior point method on nearby problems.

Re-solving from a solved point with duals takes a couple of iterations;
a perturbed-demand problem started from the old solution beats the cold
start, matching the intuition that nearby problems share their active sets.
"""

from dataclasses import replace

from gridopt import grid_model as gm
from gridopt import ipm_core as ipm
from gridopt import opf_problems as op

grid = gm.load_bundled_case("case9")
problem = op.build_opf(grid)
opt = ipm.IpmOptions(eps_tol=1e-8)

cold = ipm.solve(problem, opt)
print(f"cold start: {cold.iterations} iterations, "
      f"objective {cold.objective:.4f}")

scaled = ipm.scale_problem(problem, cold.scaling)
start = ipm.warm_start(scaled, cold.iterate, mu_ws=1e-6, init_duals=True)
again = ipm.solve(problem, opt, start=start)
print(f"re-solve from own solution: {again.iterations} iterations")

for pct in (1.0, 2.0, 5.0):
    perturbed = replace(grid, buses=tuple(
        replace(b, pd=b.pd * (1 + pct / 100), qd=b.qd * (1 + pct / 100))
        for b in grid.buses))
    p_prob = op.build_opf(perturbed)
    cold_p = ipm.solve(p_prob, opt)
    spr = ipm.scale_problem(p_prob, ipm.compute_scaling(p_prob, p_prob.x0))
    start_p = ipm.warm_start(spr, cold.iterate, mu_ws=1e-4, init_duals=True)
    warm_p = ipm.solve(p_prob, opt, start=start_p)
    print(f"+{pct:.0f}% load: cold {cold_p.iterations} iters, "
          f"warm {warm_p.iterations} iters")
