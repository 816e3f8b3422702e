"""
Position-dependent signal features
==================================

Learn a PCA feature map of the received-signal magnitudes and fit one GP
per feature over positions where the anchor is obstructed. The GP
predictive spread grows away from the training data, which is what lets
the tracker discount features there.
"""

import numpy as np

from hybridloc.features import encode, fit_normalizer, normalize, pca_features
from hybridloc.gpr import FeatureMap, fit
from hybridloc.pipeline import ExperimentConfig, Simulator
from hybridloc.scenario import generate_grid

cfg = ExperimentConfig()
scenario = cfg.scenario()
sim = Simulator(scenario, cfg.signal)
rng = np.random.default_rng(0)
anchor = scenario.anchors[1]

# pre-training on a coarse grid over the whole room
grid = generate_grid(scenario.grid_bounds, 1.0)
grid = grid[np.linalg.norm(grid - anchor.p, axis=1) > 0.1]
mags = sim.magnitudes(grid, anchor, rng)
enc = pca_features(mags, cfg.features.latent_dim, cfg.features.input_transform)
print("feature dimension:", enc.latent_dim)

# labeled positions on a finer grid where the anchor has no LOS
fine = generate_grid(scenario.grid_bounds, scenario.full_spacing)
blocked = fine[~scenario.visibility(fine)[:, 1]]
print("obstructed training positions:", len(blocked))
norm = fit_normalizer(encode(enc, mags))
z = normalize(norm, encode(enc, sim.magnitudes(blocked, anchor, rng)))
fmap = FeatureMap([fit(blocked, z[:, i]) for i in range(z.shape[1])])
for i, m in enumerate(fmap.models):
    print(f"feature {i + 1}: length scale {m.hyper.length_scale:.2f} m, "
          f"signal var {m.hyper.signal_var:.3f}, noise var {m.hyper.noise_var:.4f}")

# predictive std inside the shadow versus far from any training point
inside = blocked.mean(axis=0)
outside = np.array([8.0, 8.0])
for name, q in (("inside shadow", inside), ("far corner", outside)):
    mu, var = fmap.predict(q)
    print(f"{name:14s} {q}: mean {np.round(mu[0], 2)}  std {np.round(np.sqrt(var[0]), 2)}")
