# %% [markdown]
# Comparing sets of occupancy grids
#
# Grids are embedded with a frozen random 3D conv net. FID compares the
# Gaussian fits of two embedding sets, KID compares them with an unbiased
# polynomial-kernel MMD. Values only mean something relative to each other
# under the same embedder seed.

# %%
import numpy as np

from occudiff import metrics

rng = np.random.default_rng(0)
gt = [(rng.random((16, 16, 16)) < 0.15).astype(np.uint8) for _ in range(80)]
close = [np.where(rng.random(g.shape) < 0.02, 1 - g, g) for g in gt]
empty = [np.zeros_like(g) for g in gt]

emb = metrics.GridEmbedder(seed=0)
G, C, E = (emb.embed_many(s) for s in (gt, close, empty))
print("FID close %.4f  empty %.4f" % (metrics.fid(C, G), metrics.fid(E, G)))
print("KIDx1000 close %.3f  empty %.3f" % (1000 * metrics.kid(C, G), 1000 * metrics.kid(E, G)))
print("IoU close %.3f" % np.mean([metrics.iou(c, g) for c, g in zip(close, gt)]))
