"""
Grid models and the AC power flow
=================================

Load a bundled feeder, look at its admittance matrix, solve one power flow
and check that the solution satisfies the power-flow equations.
"""

import numpy as np

from sfse.grid import load_case, observability, pfe_residual
from sfse.power_flow import solve_power_flow

# The 36-bus feeder ships with the package. Bus 0 is the substation (slack).
grid = load_case("ieee37")
print(grid.name, grid.n_buses, "buses,", len(grid.branches), "branches")
print("base impedance", round(grid.base_impedance_ohm, 2), "ohm")

# Row sums of Y are the shunt admittances only, so they are tiny here.
print("largest |row sum| of Y:", np.abs(grid.Y.sum(axis=1)).max())

# Every PQ bus draws 20 kW at power factor 0.97.
s = np.zeros(grid.n_buses, dtype=complex)
s[grid.pq_buses] = -(0.02 + 0.02 * np.tan(np.arccos(0.97)) * 1j)
sol = solve_power_flow(grid, s)
print(f"converged in {sol.iterations} iterations, mismatch {sol.final_mismatch:.1e}")
print("lowest voltage magnitude", np.abs(sol.v).min().round(5), "p.u.")

# The residual s - diag(v) Y* v* is zero on the PQ buses.
r = pfe_residual(grid, s, sol.v)
print("max PQ residual", np.abs(r[grid.pq_buses]).max())

# Observability counts measured phasors out of 2N.
for n_s in (35, 28, 18, 12, 6):
    print(f"n_s={n_s:2d}: {observability(n_s, 0, grid.n_buses):.0%}")
