"""Thin a scan along its scan lines and build the nested five-level pyramid.

Run: python3 demos/subsampling.py
"""
import numpy as np

from hdvnet.density import density_profile
from hdvnet.scene import generate_scene, mine_scene_spec
from hdvnet.subsample import build_pyramid, lidar_grid_subsample, random_subsample

cloud = generate_scene(mine_scene_spec(4), seed=4)
groups = density_profile(cloud, k=16, jitter=True).group
print(f"{cloud.n} points over groups {groups.min()}..{groups.max()}")

# Grid thinning to a group drops points only where they are denser than it,
# so sparse regions keep everything.
target = int(groups.min()) + 2
res = lidar_grid_subsample(cloud.rows, cloud.cols, groups, target_group=target)
dense = groups < target
print(f"target group {target}: kept {len(res.indices)} "
      f"({np.isin(np.flatnonzero(~dense), res.indices).mean():.0%} of the sparse points)")

# Random thinning removes the same share everywhere.
rnd = random_subsample(cloud.n, len(res.indices), np.random.default_rng(0))
print(f"random to the same count keeps {np.isin(np.flatnonzero(~dense), rnd).mean():.0%} of them")

pyr = build_pyramid(cloud, groups, [512, 128, 32, 8, 4], k=16)
print("pyramid counts:", pyr.counts, "| neighbours per level:", [t.k for t in pyr.neighbors])
