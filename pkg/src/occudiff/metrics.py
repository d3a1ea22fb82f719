"""Distribution and occupancy metrics: FID, KID, IoU and predicted/observed ratio.

Grids are embedded by a frozen, randomly initialised 3D convolutional
feature extractor. Absolute FID/KID values therefore only support
comparisons made with the same embedder seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class GridEmbedder:
    """Two strided 3x3x3 convolutions with ReLU, then global mean and max pooling."""

    dims: tuple = (16, 16, 16)
    seed: int = 0
    dim: int = 64
    channels: tuple = (16, 32)

    def __post_init__(self):
        self.dims = tuple(self.dims)
        if self.dim != 2 * self.channels[-1]:
            self.channels = (self.channels[0], self.dim // 2)
        rng = np.random.default_rng(self.seed)
        self.weights = []
        cin = 1
        for cout in self.channels:
            fan_in = cin * 27
            bound = 1.0 / math.sqrt(fan_in)
            # clipped normal init keeps every layer's Lipschitz constant bounded
            w = np.clip(rng.normal(0.0, bound, size=(cout, cin, 3, 3, 3)), -2 * bound, 2 * bound)
            b = np.clip(rng.normal(0.0, 0.1, size=cout), -0.2, 0.2)
            self.weights.append((w, b))
            cin = cout

    @staticmethod
    def _conv(x, w, b):
        # x: (C, X, Y, Z); stride 2, padding 1
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::2, ::2, ::2]
        out = np.einsum("cxyzijk,ocijk->oxyz", win, w, optimize=True)
        return out + b[:, None, None, None]

    def embed(self, grid) -> np.ndarray:
        g = np.asarray(getattr(grid, "values", grid), dtype=np.float64)
        if g.shape != self.dims:
            raise ValueError(f"grid dims {g.shape} != embedder dims {self.dims}")
        h = g[None]
        for w, b in self.weights:
            h = np.maximum(self._conv(h, w, b), 0.0)
        flat = h.reshape(h.shape[0], -1)
        return np.concatenate([flat.mean(axis=1), flat.max(axis=1)])

    def embed_many(self, grids) -> np.ndarray:
        return np.stack([self.embed(g) for g in grids]) if len(grids) else np.zeros((0, self.dim))


def embed(grid, embedder: GridEmbedder) -> np.ndarray:
    return embedder.embed(grid)


def _sqrtm_psd(a):
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(features_a, features_b, regularize: bool = False, eps: float = 1e-6):
    """Frechet distance between Gaussians fitted to two feature sets.

    The trace of ``(S_a S_b)^{1/2}`` is taken from the eigenvalues of the
    symmetric ``S_a^{1/2} S_b S_a^{1/2}``. Sets smaller than ``d + 1`` need
    ``regularize=True``, which adds ``eps * I`` to both covariances.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    d = a.shape[1]
    if b.shape[1] != d:
        raise ValueError("feature dimensions differ")
    if min(len(a), len(b)) < 2 or (min(len(a), len(b)) < d + 1 and not regularize):
        raise ValueError(f"need at least d + 1 = {d + 1} samples per set (got {len(a)}, {len(b)})")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False)
    sb = np.cov(b, rowvar=False)
    if regularize:
        sa = sa + eps * np.eye(d)
        sb = sb + eps * np.eye(d)
    ra = _sqrtm_psd(sa)
    m = ra @ sb @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tol = 1e-8 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"covariance product has eigenvalue {w.min():.3e} < 0")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)


def _poly_kernel(x, y, d):
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(a, b):
    d = a.shape[1]
    m, n = len(a), len(b)
    kaa = _poly_kernel(a, a, d)
    kbb = _poly_kernel(b, b, d)
    kab = _poly_kernel(a, b, d)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def kid(features_a, features_b, subsets: int | None = None, subset_size: int = 1000, seed: int = 0):
    """Unbiased squared MMD with the cubic polynomial kernel (not scaled by 1000).

    With ``subsets`` set, averages the estimate over random subsets.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("kid needs at least two samples per set")
    if not subsets:
        return _mmd2_unbiased(a, b)
    rng = np.random.default_rng(seed)
    k = min(subset_size, len(a), len(b))
    vals = [_mmd2_unbiased(a[rng.choice(len(a), k, replace=False)], b[rng.choice(len(b), k, replace=False)])
            for _ in range(subsets)]
    return float(np.mean(vals))


def iou(pred, gt) -> float:
    p = np.asarray(getattr(pred, "values", pred)) > 0
    g = np.asarray(getattr(gt, "values", gt)) > 0
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def vp_vo(result) -> float:
    """Predicted-occupied over observed-occupied voxels; NaN when nothing is observed occupied."""
    if result.v_o <= 0:
        return float("nan")
    return result.v_p / result.v_o


@dataclass
class MetricReport:
    name: str
    fid: float
    kid_x1000: float
    iou: list = field(default_factory=list)
    vp_vo: list = field(default_factory=list)
    n_samples: int = 0
    n_reference: int = 0
    embedder_seed: int = 0
    regularized: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_iou"] = float(np.mean(self.iou)) if self.iou else float("nan")
        return d


def evaluate_run(predictions, baselines, ground_truths, embedder: GridEmbedder, ids=None,
                 vp_vo_series=None, config: dict | None = None):
    """FID/KID of predictions and baseline crops against ground truth.

    The three sequences are aligned per pose. ``ids`` (sortable) fix the
    reduction order. Returns ``(ss_report, bl_report)``.
    """
    n = len(ground_truths)
    if len(predictions) != n or len(baselines) != n:
        raise ValueError(f"misaligned sets: {len(predictions)} predictions, {len(baselines)} baselines, "
                         f"{n} ground truths")
    if n < 2:
        raise ValueError("need at least two poses")
    order = sorted(range(n), key=lambda i: ids[i]) if ids is not None else list(range(n))
    gt = embedder.embed_many([ground_truths[i] for i in order])
    reports = []
    for name, grids in (("SS", predictions), ("BL", baselines)):
        feats = embedder.embed_many([grids[i] for i in order])
        reg = n < embedder.dim + 1
        reports.append(MetricReport(
            name=name,
            fid=fid(feats, gt, regularize=reg),
            kid_x1000=1000.0 * kid(feats, gt),
            iou=[iou(grids[i], ground_truths[i]) for i in order],
            vp_vo=list(vp_vo_series) if (vp_vo_series is not None and name == "SS") else [],
            n_samples=n, n_reference=n, embedder_seed=embedder.seed, regularized=reg,
            config=config or {},
        ))
    return reports[0], reports[1]


def write_summary(path, reports, extra=None) -> None:
    payload = {"reports": [r.to_dict() for r in reports]}
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
