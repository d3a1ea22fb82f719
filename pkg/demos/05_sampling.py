# %% [markdown]
# Predicting unseen occupancy
#
# Reverse diffusion runs on the whole local region, but before every network
# call the observed cells are overwritten with the known map values noised to
# the current level. The final grid keeps every observed cell and fills the
# rest. Guidance mixes the conditional and unconditional predictions.
#
# An untrained network is used here so the script runs in seconds; the
# pipeline's `occudiff train` produces a useful one.

# %%
import numpy as np
import torch

from occudiff import model as M
from occudiff import sampler as S
from occudiff import scenegen as sg
from occudiff import voxel
from occudiff.sched import linear_schedule

torch.manual_seed(0)
spec, grid = sg.generate_scene(2)
pose = sg.plan_trajectory(spec, 2, 0.3, grid)[5]
m = voxel.OccupancyMap()
r = sg.render_depth(grid, pose)
voxel.integrate_scan(m, r.sensor_origin, r.endpoints, r.hit_flags)

net = M.Denoiser()
cfg = S.SamplerConfig(steps=10, guidance=3.0)
result, region, cloud = S.predict_at_pose(m, pose, grid, sg.DepthCamera(), net, linear_schedule(1000), cfg)

# %%
known = region.mask == 1
print("observed fraction %.2f" % region.mask_fraction())
print("observed cells kept:", np.array_equal(result.predicted.values[known], region.occupied_known()[known]))
print("novel cells proposed:", len(result.overlay))
print("v_p / v_o = %d / %d" % (result.v_p, result.v_o))
print("mean step time %.3f s" % np.mean(result.step_times))
