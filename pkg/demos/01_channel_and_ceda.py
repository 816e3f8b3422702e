"""
From floor plan to range measurements
=====================================

Walk one agent position through the measurement chain: image-source
propagation paths, the synthesized baseband signal and the component
estimates of the channel estimator.
"""

import numpy as np

from hybridloc.ceda import estimate_components
from hybridloc.likelihood import LhfParams, sigma_d
from hybridloc.pipeline import ExperimentConfig, Simulator

cfg = ExperimentConfig()
scenario = cfg.scenario()
sim = Simulator(scenario, cfg.signal)
rng = np.random.default_rng(1)

# a trajectory point where the obstacle hides anchor 2 but not anchor 1
p = scenario.trajectory().positions[60]
print("agent at", np.round(p, 2))
print("LOS visibility per anchor:", scenario.visibility(p)[0])

# the propagation paths per anchor: LOS (order 0) and wall reflections
for a in scenario.anchors:
    print(f"\nanchor {a.id} at {a.p}")
    for c in sim.components(p, a):
        print(f"  order {c.order}  distance {c.distance:6.3f} m  amplitude {c.normalized_amplitude:6.2f}")

# received signals, then the estimated components above the threshold
params = LhfParams()
for a, s in zip(scenario.anchors, sim.signals(p, rng)):
    print(f"\nanchor {a.id}: {len(s.samples)} samples, peak |r| = {np.abs(s.samples).max():.1f}")
    true_d = np.linalg.norm(p - a.p)
    for m in estimate_components(s, cfg.pulse(), cfg.ceda.gamma):
        sd = float(sigma_d(m.z_u, params))
        print(f"  z_d = {m.z_d:6.3f} m  z_u = {m.z_u:6.2f}  sigma_d(z_u) = {sd * 1000:5.2f} mm")
    print(f"  true LOS distance {true_d:.3f} m")
