"""
Training the physics-informed estimator
=======================================

Train the LSTM-based estimator twice, with and without the power-flow
penalty, and compare both to carrying the last voltage forward.
"""

import numpy as np

from sfse.data import LoadProfileConfig, build_dataset, generate_timeline
from sfse.evaluation import persistence_estimate, polar_mse
from sfse.grid import ObservabilityMask, load_case
from sfse.train import TrainConfig, predict_batch, train

grid = load_case("case4_dist")
profile = LoadProfileConfig(n_households=3, duration_steps=7 * 14400, daily_period_steps=14400,
                            load_peak=0.3, pv_peak=0.2, walk_crossing_steps=180, seed=1)
timeline = generate_timeline(grid, profile, window=10, factor=10, n_load_buses=3, n_pv_buses=2)
ds = build_dataset(timeline, T=5, mask=ObservabilityMask.by_index(4, 3), n_sequences=1200, seed=0)
v_true = ds.test.arrays()[3]

baseline = np.stack([persistence_estimate(s) for s in ds.test])
print("persistence  mag %.2e  ang %.2e" % polar_mse(baseline, v_true))

for lam in (0.0, 2.0):
    model = train(ds, grid, TrainConfig(lam=lam, epochs=200, seed=0))
    mse = polar_mse(predict_batch(model, ds.test), v_true)
    print(f"dnn lambda={lam:g}  mag {mse[0]:.2e}  ang {mse[1]:.2e}  best epoch {model.best_epoch}")
