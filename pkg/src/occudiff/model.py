"""Noise-prediction network, point-cloud encoder and training utilities.

The denoiser is a two-level 3D U-net with residual blocks. Diffusion time
enters each block as a per-channel bias from a sinusoidal embedding; the
point-cloud feature vector modulates each block through FiLM scale/shift.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import sched


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    dims: tuple = (16, 16, 16)
    widths: tuple = (16, 32)
    time_dim: int = 64
    feat_dim: int = 64
    point_hidden: tuple = (32, 64)
    groups: int = 8
    T: int = 1000
    parameterization: str = "eps"  # "eps" or "x0"

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.widths = tuple(self.widths)
        self.point_hidden = tuple(self.point_hidden)
        if self.parameterization not in ("eps", "x0"):
            raise ValueError("parameterization must be 'eps' or 'x0'")
        if any(n % 2 for n in self.dims):
            raise ValueError("grid dims must be even for the two-level U-net")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 250
    cond_dropout: float = 0.2
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    warmup_steps: int = 500
    total_steps: int | None = None  # cosine span end; defaults to warmup + 10 * warmup
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    parameterization: str = "eps"

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        self.betas = tuple(self.betas)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup ``lr_min -> lr_max`` then cosine decay back to ``lr_min``."""
    lo, hi, w = config.lr_min, config.lr_max, config.warmup_steps
    if step < w:
        return lo + (hi - lo) * step / w
    total = config.total_steps if config.total_steps is not None else w + 10 * max(w, 1)
    span = max(total - w, 1)
    frac = min((step - w) / span, 1.0)
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class PointEncoder(nn.Module):
    """Shared per-point MLP followed by a coordinatewise max over points."""

    def __init__(self, hidden=(32, 64), feat_dim=64):
        super().__init__()
        layers, prev = [], 3
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.SiLU()]
            prev = h
        layers.append(nn.Linear(prev, feat_dim))
        self.mlp = nn.Sequential(*layers)
        self.null = nn.Parameter(torch.randn(feat_dim) * 0.1)

    def forward(self, cloud: torch.Tensor | None) -> torch.Tensor:
        if cloud is None or cloud.shape[0] == 0:
            return self.null
        if not torch.isfinite(cloud).all():
            raise ValueError("point cloud contains non-finite coordinates")
        return self.mlp(cloud).max(dim=0).values


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, feat_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(groups, cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.film = nn.Linear(feat_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(math.gcd(groups, cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None, None]
        scale, shift = self.film(cond).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None, None]) + shift[:, :, None, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = c = config or ModelConfig()
        c1, c2 = c.widths
        self.encoder = PointEncoder(c.point_hidden, c.feat_dim)
        self.time_mlp = nn.Sequential(nn.Linear(c.time_dim, c.time_dim), nn.SiLU(),
                                      nn.Linear(c.time_dim, c.time_dim))
        args = (c.time_dim, c.feat_dim, c.groups)
        self.conv_in = nn.Conv3d(1, c1, 3, padding=1)
        self.block1 = ResBlock(c1, c1, *args)
        self.down = nn.Conv3d(c1, c1, 3, stride=2, padding=1)
        self.block2 = ResBlock(c1, c2, *args)
        self.mid = ResBlock(c2, c2, *args)
        self.up = nn.Conv3d(c2, c1, 3, padding=1)
        self.block3 = ResBlock(2 * c1, c1, *args)
        self.norm_out = nn.GroupNorm(math.gcd(c.groups, c1), c1)
        self.conv_out = nn.Conv3d(c1, 1, 3, padding=1)

    def encode(self, clouds) -> torch.Tensor:
        """Stack feature vectors for a list of clouds; ``None`` entries get the null embedding."""
        dtype = self.encoder.null.dtype
        feats = []
        for cl in clouds:
            if cl is None:
                feats.append(self.encoder(None))
            else:
                feats.append(self.encoder(torch.as_tensor(np.asarray(cl), dtype=dtype)))
        return torch.stack(feats)

    def forward(self, x, t, cond):
        """``x``: (B, nx, ny, nz); ``t``: (B,) original timesteps; ``cond``: (B, F)."""
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.config.time_dim))
        h0 = self.conv_in(x[:, None])
        h1 = self.block1(h0, temb, cond)
        h = self.down(h1)
        h = self.block2(h, temb, cond)
        h = self.mid(h, temb, cond)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block3(torch.cat([h, h1], dim=1), temb, cond)
        return self.conv_out(F.silu(self.norm_out(h)))[:, 0]


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def encode_points(model: Denoiser, cloud) -> np.ndarray:
    """Conditioning feature vector for one cloud (empty cloud gives the null embedding)."""
    with torch.no_grad():
        cl = None if cloud is None or len(cloud) == 0 else cloud
        return model.encode([cl])[0].numpy().copy()


def null_embedding(model: Denoiser) -> np.ndarray:
    return model.encoder.null.detach().numpy().copy()


def predict_noise(model: Denoiser, x_t, t, cond=None, schedule: sched.NoiseSchedule | None = None):
    """Predicted noise for one or a batch of grids.

    ``x_t`` is ``dims`` or ``(B, *dims)``; ``t`` is the original training
    timestep (scalar or per batch); ``cond`` is a feature vector, a batch of
    them, or ``None`` for the null embedding. Under the ``x0``
    parameterization the network output is converted to noise using
    ``schedule``.
    """
    x = np.asarray(x_t)
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.config.dims):
        raise ValueError(f"grid dims {x.shape[1:]} != model dims {model.config.dims}")
    B = x.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,)).copy()
    if np.any(tt < 1) or np.any(tt > model.config.T):
        raise ValueError("timestep out of range")
    dtype = model.encoder.null.dtype
    with torch.no_grad():
        if cond is None:
            c = model.encoder.null.expand(B, -1)
        else:
            c = torch.as_tensor(np.asarray(cond), dtype=dtype)
            c = c.expand(B, -1) if c.ndim == 1 else c
        out = model(torch.as_tensor(x, dtype=dtype), torch.as_tensor(tt), c).numpy().astype(np.float64)
    if model.config.parameterization == "x0":
        if schedule is None:
            raise ValueError("x0 parameterization needs the training schedule")
        out = np.stack([sched.eps_from_x0(x[i], out[i], tt[i], schedule) for i in range(B)])
    return out[0] if single else out


# --------------------------------------------------------------------------
# training


def to_diffusion(binary) -> np.ndarray:
    """{0, 1} occupancy -> {-1, +1} diffusion domain."""
    return np.asarray(binary, dtype=np.float64) * 2.0 - 1.0


def draw_batch_noise(rng: np.random.Generator, B: int, dims, T: int, dropout: float):
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal((B, *dims))
    drop = rng.random(B) < dropout
    return t, eps, drop


def loss(model: Denoiser, x0, clouds, schedule: sched.NoiseSchedule, rng: np.random.Generator,
         config: TrainConfig, noise=None) -> torch.Tensor:
    """Mean squared error of the network target for one batch.

    ``x0`` is ``(B, *dims)`` in the diffusion domain. Random draws (timestep,
    noise, conditioning dropout) come from ``rng`` in a fixed order, or from
    ``noise`` when given as ``(t, eps, drop)``. Dropped samples never touch
    their cloud.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    t, eps, drop = noise if noise is not None else draw_batch_noise(
        rng, B, x0.shape[1:], schedule.T, config.cond_dropout)
    ab = schedule.alpha_bar[t - 1].reshape(B, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    dtype = model.encoder.null.dtype
    cond = model.encode([None if drop[i] else clouds[i] for i in range(B)])
    out = model(torch.as_tensor(x_t, dtype=dtype), torch.as_tensor(schedule.timesteps[t - 1]), cond)
    target = eps if config.parameterization == "eps" else x0
    return ((out - torch.as_tensor(target, dtype=dtype)) ** 2).mean()


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr_min, betas=config.betas, eps=config.eps)


def train_step(model: Denoiser, optimizer, x0, clouds, schedule, rng, config: TrainConfig,
               step: int, batch_id=None, lr: float | None = None) -> float:
    """One Adam update; returns the batch loss. Raises on non-finite loss or gradients."""
    for g in optimizer.param_groups:
        g["lr"] = lr_at(step, config) if lr is None else lr
    optimizer.zero_grad(set_to_none=True)
    value = loss(model, x0, clouds, schedule, rng, config)
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step} (batch {batch_id})")
    value.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name} at step {step} (batch {batch_id})")
    optimizer.step()
    return float(value.detach())


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def train(model: Denoiser, optimizer, x0_all, clouds_all, schedule, config: TrainConfig,
          start_epoch: int = 0, epochs: int | None = None, on_epoch=None, log_every: int = 0):
    """Shuffled minibatch training. Returns the list of mean epoch losses.

    Sample order and per-step randomness derive from ``config.seed`` and the
    epoch/step index only, so resuming at an epoch boundary replays exactly.
    """
    n = len(x0_all)
    steps_per_epoch = math.ceil(n / config.batch_size)
    history = []
    end = config.epochs if epochs is None else start_epoch + epochs
    for epoch in range(start_epoch, end):
        order = epoch_order(n, config.seed, epoch)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            step = epoch * steps_per_epoch + b
            losses.append(train_step(model, optimizer, x0_all[idx], [clouds_all[i] for i in idx],
                                     schedule, step_rng(config.seed, step), config, step,
                                     batch_id=(epoch, b)))
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], losses)
    return history


# --------------------------------------------------------------------------
# gradient verification


def grad_check(loss_fn, params, n_samples: int = 200, seed: int = 0, h: float = 1e-5,
               floor: float = 1e-7):
    """Max relative error between autograd and central finite differences.

    ``loss_fn()`` must be deterministic. Parameters are sampled uniformly over
    all scalar entries; the step is ``h * max(1, |theta|)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. Returns ``(max_err, records)``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    value = loss_fn()
    value.backward()
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_samples, offsets[-1]), replace=False)
    records = []
    with torch.no_grad():
        for flat in np.sort(picks):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = params[pi]
            j = int(flat - offsets[pi])
            view = p.view(-1)
            orig = view[j].item()
            step = h * max(1.0, abs(orig))
            view[j] = orig + step
            fp = loss_fn().item()
            view[j] = orig - step
            fm = loss_fn().item()
            view[j] = orig
            num = (fp - fm) / (2 * step)
            ana = p.grad.view(-1)[j].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            records.append((pi, j, ana, num, err))
    return max(r[-1] for r in records), records


# --------------------------------------------------------------------------
# checkpoints


def _tensor_items(model: nn.Module, optimizer=None):
    items = [(f"model.{k}", v) for k, v in model.state_dict().items()]
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p in model.parameters():
            st = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    items.append((f"optim.{names[id(p)]}.{key}", st[key]))
    return items


def save_checkpoint(path, model: Denoiser, optimizer=None, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Write ``manifest.json`` + ``weights.bin`` (f32 little-endian, registry order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    registry, chunks, offset = [], [], 0
    for name, tensor in _tensor_items(model, optimizer):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        registry.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    optim_steps = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p in model.parameters():
            st = optimizer.state.get(p, {})
            if "step" in st:
                optim_steps[names[id(p)]] = float(st["step"])
    manifest = {
        "format": "occudiff-checkpoint-1",
        "architecture": asdict(model.config),
        "n_params": n_params(model),
        "tensors": registry,
        "train_config": asdict(train_config) if train_config else None,
        "optimizer_steps": optim_steps,
        "extra": extra or {},
    }
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path, optimizer_config: TrainConfig | None = None):
    """Returns ``(model, optimizer_or_None, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = Denoiser(ModelConfig(**manifest["architecture"]))
    raw = (path / "weights.bin").read_bytes()
    tensors = {}
    for rec in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(rec["shape"])), offset=rec["offset"])
        tensors[rec["name"]] = torch.from_numpy(arr.reshape(rec["shape"]).copy())
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    expected = model.state_dict()
    for k, v in expected.items():
        if k not in state or tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(f"checkpoint tensor {k} missing or mis-shaped")
    model.load_state_dict(state)
    optimizer = None
    if optimizer_config is not None:
        optimizer = make_optimizer(model, optimizer_config)
        for name, p in model.named_parameters():
            if f"optim.{name}.exp_avg" in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(manifest["optimizer_steps"][name]),
                    "exp_avg": tensors[f"optim.{name}.exp_avg"],
                    "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"],
                }
    return model, optimizer, manifest
