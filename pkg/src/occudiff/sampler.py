"""Guided reverse diffusion with occupancy inpainting.

Each reverse step first writes a freshly noised copy of the observed region
into the state, then combines conditional and unconditional noise
predictions, then takes an ancestral step. A final zero-noise composition
puts the observed values back exactly, so observed space is never altered.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import sched, voxel
from .voxel import LocalRegion, VoxelGrid


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 30
    guidance: float = 3.0
    inpaint: bool = True
    condition: bool = True
    threshold: float = 0.0
    seed: int = 0
    n_predictions: int = 1
    inpaint_before_denoise: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


@dataclass
class PredictionResult:
    predicted: VoxelGrid  # binary
    raw: VoxelGrid  # continuous, clamped to [-1, 1]
    overlay: set = field(default_factory=set)
    v_p: int = 0
    v_o: int = 0
    step_times: list = field(default_factory=list)
    seed: int = 0

    def stats(self) -> dict:
        return {"v_p": self.v_p, "v_o": self.v_o, "novel": len(self.overlay),
                "mean_step_time": float(np.mean(self.step_times)) if self.step_times else 0.0,
                "seed": self.seed}


def cfg_combine(eps_uncond, eps_cond, s: float):
    eu = np.asarray(eps_uncond)
    ec = np.asarray(eps_cond)
    if eu.shape != ec.shape:
        raise ValueError(f"shape mismatch {eu.shape} vs {ec.shape}")
    if s == 1:
        return ec.copy()
    return eu + s * (ec - eu)


def inpaint_step(x_t, region: LocalRegion, t: int, schedule: sched.NoiseSchedule, rng=None, eps=None):
    """Overwrite observed cells with the known values noised to level ``t``.

    ``t = 0`` composes the clean known values. ``eps`` overrides the fresh
    noise draw from ``rng``.
    """
    x = np.asarray(x_t)
    mask = region.mask
    if x.shape != mask.shape:
        raise ValueError(f"state dims {x.shape} != region dims {mask.shape}")
    if not mask.any():
        return x
    if eps is None:
        eps = rng.standard_normal(x.shape) if t > 0 else np.zeros(x.shape)
    known = sched.q_sample(region.values, t, eps, schedule)
    return np.where(mask == 1, known, x)


def _check_finite(x, step_index):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state at step {step_index}")


def sample(model: mdl.Denoiser, schedule: sched.NoiseSchedule, region: LocalRegion, cloud,
           config: SamplerConfig | None = None, seed: int | None = None,
           cond_vector=None) -> PredictionResult:
    """Draw one occupancy prediction for ``region``.

    ``schedule`` is the training schedule; it is respaced to
    ``config.steps``. Deterministic in ``seed`` (defaults to ``config.seed``).
    """
    cfg = config or SamplerConfig()
    seed = cfg.seed if seed is None else seed
    if tuple(region.dims) != tuple(model.config.dims):
        raise ValueError(f"region dims {region.dims} != model dims {model.config.dims}")
    rng = np.random.default_rng(seed)
    sub = sched.respace(schedule, cfg.steps)
    dims = tuple(region.dims)

    use_cond = cfg.condition and cfg.guidance != 0 and (
        cond_vector is not None or (cloud is not None and len(cloud) > 0))
    c_vec = None
    if use_cond:
        c_vec = cond_vector if cond_vector is not None else mdl.encode_points(model, cloud)
    null = mdl.null_embedding(model)

    x = rng.standard_normal(dims)
    times = []
    for i in range(sub.T, 0, -1):
        t0 = time.perf_counter()
        t_orig = int(sub.timesteps[i - 1])
        if cfg.inpaint and cfg.inpaint_before_denoise:
            x = inpaint_step(x, region, i, sub, rng)
        if not use_cond:
            eps = mdl.predict_noise(model, x, t_orig, null, schedule)
        elif cfg.guidance == 1:
            eps = mdl.predict_noise(model, x, t_orig, c_vec, schedule)
        else:
            both = mdl.predict_noise(model, np.stack([x, x]), t_orig, np.stack([null, c_vec]), schedule)
            eps = cfg_combine(both[0], both[1], cfg.guidance)
        z = rng.standard_normal(dims) if i > 1 else None
        x = sched.p_step(x, eps, i, sub, z)
        if cfg.inpaint and not cfg.inpaint_before_denoise and i > 1:
            x = inpaint_step(x, region, i - 1, sub, rng)
        _check_finite(x, i)
        times.append(time.perf_counter() - t0)

    if cfg.inpaint:
        x = inpaint_step(x, region, 0, sub)
    raw = np.clip(x, -1.0, 1.0)
    binary = (raw > cfg.threshold).astype(np.uint8)
    g = region.known_values
    return PredictionResult(
        predicted=VoxelGrid(binary, g.voxel_size, g.origin),
        raw=VoxelGrid(raw.astype(np.float32), g.voxel_size, g.origin),
        v_p=int(binary.sum()),
        v_o=int(region.occupied_known().sum()),
        step_times=times,
        seed=int(seed),
    )


def sample_many(model, schedule, region, cloud, config: SamplerConfig | None = None, n: int | None = None,
                threads: int = 1) -> list:
    """``n`` independent predictions with seeds ``config.seed ^ index``."""
    cfg = config or SamplerConfig()
    n = cfg.n_predictions if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    c_vec = None
    if cfg.condition and cloud is not None and len(cloud) > 0:
        c_vec = mdl.encode_points(model, cloud)

    def one(i):
        return sample(model, schedule, region, cloud, cfg, seed=cfg.seed ^ i, cond_vector=c_vec)

    if threads <= 1:
        return [one(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(n)))


def predict_at_pose(occ_map: voxel.OccupancyMap, pose: voxel.Pose, ground_truth: VoxelGrid, camera,
                    model: mdl.Denoiser, schedule: sched.NoiseSchedule, config: SamplerConfig | None = None,
                    seed: int | None = None, cloud_cap: int = 1024):
    """Render the current view, crop the running map and predict the local region.

    Returns ``(result, region, cloud)``; ``result.overlay`` holds the novel
    predicted cells in map indices.
    """
    from . import scenegen

    cfg = config or SamplerConfig()
    seed = cfg.seed if seed is None else seed
    dims = model.config.dims
    render = scenegen.render_depth(ground_truth, pose, camera, dims)
    cloud = scenegen.subsample_cloud(render.points_local, cloud_cap, seed).astype(np.float32)
    region = voxel.extract_local(occ_map, pose, dims)
    result = sample(model, schedule, region, cloud, cfg, seed=seed)
    result.overlay = voxel.merge_prediction(occ_map, region, result.predicted)
    return result, region, cloud
