# %% [markdown]
# Training a small conditional denoiser
#
# Samples pair a ground-truth crop with the depth points seen from that pose.
# The network learns to predict the injected noise; a fifth of the batches
# see the learned null embedding instead of the point feature so the same
# network also serves as the unconditional model.

# %%
import numpy as np
import torch

from occudiff import model as M
from occudiff import scenegen as sg
from occudiff.sched import linear_schedule

torch.manual_seed(0)
params = sg.DatasetParams(poses_per_scene=8, camera=sg.DepthCamera(width=32, height=32))
scenes = [(i, *sg.generate_scene(i)) for i in range(2)]
samples = [s for _, s in sg.make_dataset(scenes, params, test_ids=[], seed=0)]
x0 = np.stack([M.to_diffusion(s.ground_truth.values) for s in samples])
clouds = [s.conditioning_cloud for s in samples]
print(x0.shape, "samples")

# %%
net = M.Denoiser()
cfg = M.TrainConfig(batch_size=8, epochs=5, lr_max=2e-3, warmup_steps=4)
print(M.n_params(net), "parameters")
history = M.train(net, M.make_optimizer(net, cfg), x0, clouds, linear_schedule(1000), cfg)
print("epoch losses", np.round(history, 4))

# %%
# gradients agree with central differences on a tiny float64 copy
tiny = M.Denoiser(M.ModelConfig(dims=(4, 4, 4), widths=(4, 8), time_dim=8, feat_dim=8,
                                point_hidden=(8, 8), groups=2)).double()
noise = (np.array([3, 700]), np.random.default_rng(1).standard_normal((2, 4, 4, 4)), np.zeros(2, bool))
xt = -np.ones((2, 4, 4, 4))
err, _ = M.grad_check(lambda: M.loss(tiny, xt, [clouds[0][:20], None], linear_schedule(1000), None, cfg,
                                     noise=noise), tiny.parameters(), n_samples=50)
print("max relative gradient error %.2e" % err)
