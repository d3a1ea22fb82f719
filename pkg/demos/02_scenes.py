# %% [markdown]
# Procedural indoor scenes and simulated depth
#
# Rooms come from recursive splits of a rectangle, each split wall gets one
# door, and furniture boxes are dropped in without blocking the doors. A
# trajectory then visits every room and a pinhole depth camera is ray-cast
# through the ground-truth grid.

# %%
import numpy as np

from occudiff import scenegen as sg
from occudiff import voxel

spec, grid = sg.generate_scene(seed=4)
print(len(spec.rooms), "rooms,", len(spec.doors), "doors,", len(spec.furniture), "furniture boxes")
print("grid", grid.dims, "occupied fraction %.3f" % grid.values.mean())

# %%
# top-down view at robot height: '#' occupied, '.' free
layer = grid.values[:, :, 3]
print("\n".join("".join("#" if v else "." for v in row) for row in layer.T[::-1]))

# %%
poses = sg.plan_trajectory(spec, seed=4, step_length=0.3, grid=grid)
print(len(poses), "poses; first", poses[0].position, "last", poses[-1].position)

# %%
render = sg.render_depth(grid, poses[0])
print("depth range %.2f .. %.2f m" % (render.depth.min(), render.depth.max()))
print(len(render.points_world), "points hit something")

# %%
# integrate the whole walk and watch coverage grow
m = voxel.OccupancyMap()
for i, pose in enumerate(poses):
    r = sg.render_depth(grid, pose, sg.DepthCamera(width=32, height=32))
    voxel.integrate_scan(m, r.sensor_origin, r.endpoints, r.hit_flags)
    if i % 10 == 0:
        print(i, m.observed_count())
