"""Full-space interior-point OPF on the 118-bus case.

Solves min generation cost subject to AC power balance and voltage/output
limits, then prints the convergence table (objective, infeasibilities,
barrier parameter, step sizes) and the binding limits at the optimum.
"""

import numpy as np

from gridopt import grid_model as gm
from gridopt import ipm_core as ipm
from gridopt import opf_problems as op

grid = gm.load_bundled_case("case118")
problem = op.build_opf(grid)
print(f"case118 OPF: {problem.n} variables, {problem.n_g} equalities, "
      f"{problem.n_h} inequalities")

result = ipm.solve(problem, ipm.IpmOptions(eps_tol=1e-6))

print(f"\n{'it':>3} {'objective':>14} {'inf_pr':>9} {'inf_du':>9} "
      f"{'mu':>8} {'alpha':>8}")
for row in result.log:
    print(f"{row.iter:>3} {row.obj:14.6e} {row.inf_pr:9.2e} "
          f"{row.inf_du:9.2e} {row.mu:8.1e} {row.alpha:8.1e}")

print(f"\nstatus: {result.status}, objective {result.objective:.2f} $/h "
      f"in {result.iterations} iterations")

# inspect the binding box constraints through the bound duals
x = result.iterate.x
z = result.iterate.z_lo - result.iterate.z_hi
sm = problem.meta["maps"][0]
vm = x[sm.vm]
print("\nbuses at their voltage limits:")
for i, bus in enumerate(grid.buses):
    d = min(vm[i] - bus.vmin, bus.vmax - vm[i])
    if d < 1e-5:
        side = "vmin" if vm[i] - bus.vmin < d + 1e-12 else "vmax"
        print(f"  bus {bus.id}: vm = {vm[i]:.4f} ({side})")
