"""Measure point density on a synthetic pit scan and split it into density states.

Run: python3 demos/density_tour.py
"""
import numpy as np

from hdvnet.density import calibrate_states, density_histogram, density_profile, inherent_state
from hdvnet.scene import generate_scene, mine_scene_spec

clouds = [generate_scene(mine_scene_spec(seed), seed=seed) for seed in range(3)]
profiles = [density_profile(c, k=16, jitter=True) for c in clouds]

cloud, prof = clouds[0], profiles[0]
print(f"scene 0: {cloud.n} points, rho spans {prof.rho.min():.3g} .. {prof.rho.max():.3g} pts/m^3")

# Groups quarter the density threshold each step, so a scan far from the
# scanner lands many groups below one near it.
hist = density_histogram(prof.group)
for g in np.flatnonzero(hist):
    print(f"  group {g:2d}: {hist[g]:5.1f}% of points")

thresholds = calibrate_states(profiles, np.array([512, 128, 32, 8, 4]) / 512)
print("state thresholds t_0..t_5:", ", ".join(f"{t:.4g}" for t in thresholds.t))
states = inherent_state(prof.rho, thresholds)
for d in range(6):
    print(f"  state {d}: {np.sum(states == d):6d} points")
