"""
Tracking through an obstructed segment
======================================

Train the feature models on the default floor plan, then run ten
realizations with and without signal features and compare the position
error on the segment where no anchor has LOS against the posterior bound.
This takes about five minutes on one core.
"""

import tempfile

import numpy as np

from hybridloc.pipeline import (
    ExperimentConfig, RealizationRunner, compute_bounds, generate_datasets, train_models,
)
from hybridloc.tracker import FULL, PHYS_ONLY, with_mode

cfg = ExperimentConfig()
cfg.tracker.n_particles = 10_000

with tempfile.TemporaryDirectory() as tmp:
    data = generate_datasets(cfg, tmp, seed=0)
    models = train_models(cfg, data)

runner = RealizationRunner(cfg, models)
vis = runner.visibility
olos = ~vis.any(axis=1)
print(f"{len(vis)} steps; no anchor in LOS for steps {np.flatnonzero(olos)[[0, -1]]}")

bounds = compute_bounds(cfg)
print(f"P-CRLB at the end of the blockage: {bounds['pcrlb'][olos][-1]:.3f} m")

# a single realization can go either way; ten per mode show the trend
for mode in (FULL, PHYS_ONLY):
    runs = [runner.run(r, 0, with_mode(cfg.tracker, mode)) for r in range(10)]
    e = np.array([r.errors for r in runs])
    q2 = np.array([r.q[:, 1] for r in runs]).mean(axis=0)
    print(f"\n{mode}: {sum(r.lost for r in runs)} of 10 tracks lost")
    print(f"  median error while in LOS  {np.median(e[:, vis.all(axis=1)]) * 1000:7.1f} mm")
    print(f"  RMSE without LOS           {np.sqrt(np.mean(e[:, olos] ** 2)):7.3f} m")
    print(f"  LOS probability of anchor 2 before / during / after its blockage: "
          f"{q2[30]:.2f} / {q2[80]:.2f} / {q2[-1]:.2f}")
