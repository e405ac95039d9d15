"""Newton power flow on the bundled 9-bus case.

Loads the case, assembles the bus admittance matrix, solves the power flow
and prints the voltage profile plus the recovered slack/PV injections.
"""

import numpy as np

from gridopt import grid_model as gm
from gridopt import powerflow as pf

grid = gm.load_bundled_case("case9")
Y = gm.build_admittance(grid)

sol = pf.newton_pf(grid, Y, tol=1e-12)
print(f"converged in {sol.iterations} Newton iterations, "
      f"max residual {sol.max_mismatch:.2e}\n")

print(f"{'bus':>4} {'kind':>5} {'vm [pu]':>9} {'va [deg]':>9}")
kinds = {3: "REF", 2: "PV", 1: "PQ"}
for bus, vm, va in zip(grid.buses, sol.vm, sol.va):
    print(f"{bus.id:>4} {kinds[bus.kind]:>5} {vm:9.5f} {np.rad2deg(va):9.3f}")

base = grid.base_mva
print(f"\n{'gen bus':>8} {'P [MW]':>9} {'Q [MVAr]':>9}")
for g, p, q in zip(grid.generators, sol.pg, sol.qg):
    print(f"{g.bus:>8} {p * base:9.2f} {q * base:9.2f}")

# the residual sequence contracts quadratically near the solution
print("\nresidual history:", ["%.1e" % r for r in sol.residual_history])
