# %% [markdown]
# Building a running occupancy map
#
# A voxel ray caster walks every cell a sensor ray crosses. Cells along the
# ray pick up free evidence, the end cell picks up occupied evidence, and
# each cell's log-odds is clamped so the map can still change its mind later.

# %%
import numpy as np

from occudiff import voxel
from occudiff.voxel import OccupancyMap, Pose

# %%
# one diagonal ray through a 0.1 m lattice
cells = voxel.raycast(np.array([0.05, 0.05, 0.05]), np.array([1.0, 1.0, 0.0]) / np.sqrt(2), 0.5, 0.1)
print(cells)

# %%
# a fan of rays hitting a wall 0.6 m ahead; one miss is not yet enough to call a cell free
m = OccupancyMap()
origin = np.array([0.05, 0.55, 0.25])
ys = np.linspace(0.15, 0.95, 25)
ends = np.stack([np.full_like(ys, 0.65), ys, np.full_like(ys, 0.25)], axis=1)
for scan in range(3):
    voxel.integrate_scan(m, origin, ends, np.ones(len(ends), bool))
    print("scan", scan, "occupied", len(m.occupied()), "free", len(m.free()))

# %%
# crop the map around the platform: mask 1 marks observed cells
region = voxel.extract_local(m, Pose.from_yaw(origin, 0.0), (16, 16, 16))
print("observed fraction %.3f" % region.mask_fraction())
print("occupied cells in the crop:", int(region.occupied_known().sum()))
