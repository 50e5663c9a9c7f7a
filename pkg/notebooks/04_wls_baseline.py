"""
The WLS baseline
================

Fill missing powers with their previous values, weight each bus by its
recent fluctuation and solve the weighted power-flow residual with
Levenberg-Marquardt.
"""

import numpy as np

from sfse.data import SequenceSet, generate_timeline
from sfse.evaluation import polar_mse
from sfse.grid import ObservabilityMask, load_case
from sfse.wls import compute_weights, wls_estimate

grid = load_case("ieee37")
timeline = generate_timeline(grid)
targets = np.arange(9000, 10000, 50)

for n_s in (36, 28, 18):
    seqs = SequenceSet(timeline, targets, 5, ObservabilityMask.by_index(36, n_s))
    for fix in (False, True):
        est = np.stack([wls_estimate(s, grid, fix_slack=fix) for s in seqs])
        mag, ang = polar_mse(est, seqs.arrays()[3])
        label = "fixed slack" if fix else "free slack"
        print(f"n_s={n_s}  {label:11s}  mag {mag:.2e}  ang {ang:.2e}")

# Quiet buses get large weights.
print("weights of the first five buses:", compute_weights(seqs[0].history_s)[:5].round(1))
