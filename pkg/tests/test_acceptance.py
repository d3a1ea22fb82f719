"""Acceptance criteria, one test each, at the stated tolerances.

The directional, v_p/v_o trend and ablation criteria share one desk pipeline run
(default config, seed 0): about 15 minutes on one CPU core. Set
``OCCUDIFF_DESK_RUN`` to an existing run directory to reuse its artifacts.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record
from occudiff import config as C
from occudiff import metrics as MT
from occudiff import model as M
from occudiff import pipeline as P
from occudiff import sampler as S
from occudiff import scenegen as sg
from occudiff import sched, voxel
from oracles import dense_ray_cells, random_unit


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    reuse = os.environ.get("OCCUDIFF_DESK_RUN")
    if reuse:
        cfg = C.RunConfig(workdir=reuse)
        return cfg, json.loads((cfg.root / "timings.json").read_text())
    cfg = C.RunConfig(workdir=str(tmp_path_factory.mktemp("desk") / "run"))
    times = {}
    for name, fn in (("gen", lambda: P.cmd_gen(cfg)), ("train", lambda: P.cmd_train(cfg)),
                     ("explore", lambda: P.cmd_explore(cfg)), ("eval", lambda: P.cmd_eval(cfg)),
                     ("ablate", lambda: P.cmd_ablate(cfg))):
        t0 = time.perf_counter()
        fn()
        times[name] = time.perf_counter() - t0
    (cfg.root / "timings.json").write_text(json.dumps(times))
    return cfg, times


def test_diffusion_math_suite():
    t0 = time.perf_counter()
    s = sched.linear_schedule(1000)
    ab = s.alpha_bar
    monotone = bool(np.all(np.diff(ab) < 0) and ab[0] < 1 and ab[-1] > 0)
    energy = float(np.max(np.abs(np.sqrt(ab) ** 2 + (1 - ab) - 1)))

    # iterated single steps against the direct marginal, 10^4 trials each
    n, x0 = 10_000, 0.6
    rng = np.random.default_rng(2024)
    worst = 0.0
    for t in (1, 10, 100, 300):
        x = np.full(n, x0)
        for k in range(1, t + 1):
            x = sched.q_step(x, k, rng.standard_normal(n), s)
        var = 1 - ab[t - 1]
        z_mean = abs(x.mean() - math.sqrt(ab[t - 1]) * x0) / math.sqrt(var / n)
        z_var = abs(x.var(ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean, z_var)

    g = np.random.default_rng(1)
    x0v = g.uniform(-1, 1, 4096)
    eps = g.standard_normal(4096)
    back = sched.p_step(sched.q_sample(x0v, 1, eps, s), eps, 1, s)
    rel = float(np.max(np.abs(back - x0v) / np.maximum(np.abs(x0v), 1e-12)))
    dt = time.perf_counter() - t0
    ok = monotone and energy < 1e-12 and worst < 3 and rel < 1e-5 and dt < 30
    record("diffusion math suite", ok,
           f"monotone={monotone} energy_err={energy:.1e} worst_z={worst:.2f} (<3) "
           f"inverse_rel_err={rel:.1e} (<1e-5) time={dt:.1f}s")
    assert ok


def test_guidance_identities():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    net = M.Denoiser(M.ModelConfig(dims=(8, 8, 8)))
    s = sched.linear_schedule(1000)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (8, 8, 8))
    cloud = rng.uniform(-0.5, 0.5, (50, 3)).astype(np.float32)
    c = M.encode_points(net, cloud)
    eu = M.predict_noise(net, x, 500, None)
    ec = M.predict_noise(net, x, 500, c)
    combine_ok = np.array_equal(S.cfg_combine(eu, ec, 0.0), eu) and np.array_equal(S.cfg_combine(eu, ec, 1.0), ec)

    mask = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
    region = voxel.LocalRegion(voxel.Pose.from_yaw((0, 0, 0), 0), (8, 8, 8), (0, 0, 0),
                               voxel.VoxelGrid(np.where(rng.random((8, 8, 8)) < 0.3, 1.0, -1.0) * mask),
                               voxel.VoxelGrid(mask))
    cfg = dict(steps=3, seed=5)
    s0 = S.sample(net, s, region, cloud, S.SamplerConfig(guidance=0.0, **cfg))
    unc = S.sample(net, s, region, cloud, S.SamplerConfig(condition=False, **cfg))
    s1 = S.sample(net, s, region, cloud, S.SamplerConfig(guidance=1.0, **cfg))
    # conditional-only reference: same draws, network called with the cloud feature
    ref_rng = np.random.default_rng(5)
    sub = sched.respace(s, 3)
    xr = ref_rng.standard_normal((8, 8, 8))
    for i in range(3, 0, -1):
        xr = S.inpaint_step(xr, region, i, sub, ref_rng)
        e = M.predict_noise(net, xr, int(sub.timesteps[i - 1]), c)
        xr = sched.p_step(xr, e, i, sub, ref_rng.standard_normal((8, 8, 8)) if i > 1 else None)
    xr = np.clip(S.inpaint_step(xr, region, 0, sub), -1, 1).astype(np.float32)
    sample_ok = np.array_equal(s0.raw.values, unc.raw.values) and np.array_equal(s1.raw.values, xr)
    dt = time.perf_counter() - t0
    ok = combine_ok and sample_ok and dt < 1.0 + 4.0  # includes model construction
    record("guidance identities", ok, f"cfg_combine bit-exact={combine_ok} sampler bit-exact={sample_ok} "
                                      f"time={dt:.2f}s")
    assert combine_ok and sample_ok


def test_observed_space_preservation(desk_run):
    cfg, _ = desk_run
    net = P.load_model(cfg)
    s = P.training_schedule(cfg)
    rng = np.random.default_rng(11)
    samples = sg.load_samples(P.dataset_dir(cfg), "test")
    violations, n = 0, 0
    for k in range(100):
        smp = samples[k % len(samples)]
        p = rng.uniform(0.0, 1.0)
        mask = (rng.random(net.config.dims) < p).astype(np.uint8)
        known = M.to_diffusion(smp.ground_truth.values) * mask
        region = voxel.LocalRegion(smp.pose, net.config.dims, (0, 0, 0), voxel.VoxelGrid(known),
                                   voxel.VoxelGrid(mask))
        out = S.sample(net, s, region, smp.conditioning_cloud, S.SamplerConfig(steps=10), seed=k)
        m = mask == 1
        violations += int(np.sum(out.predicted.values[m] != smp.ground_truth.values[m]))
        overlay = voxel.merge_prediction(voxel.OccupancyMap(), region, out.predicted)
        violations += sum(1 for c in overlay if mask[c])
        n += 1
    explore_bad, poses = 0, 0
    for sid in P._scene_ids(cfg):
        for line in (P.explore_dir(cfg) / str(sid) / "metrics.jsonl").read_text().splitlines():
            r = json.loads(line)
            explore_bad += r["overlay_violations"] + (0 if r["known_preserved"] else 1)
            poses += 1
    ok = violations == 0 and explore_bad == 0 and n >= 100 and poses > 0
    record("observed-space preservation", ok,
           f"{n} random-mask predictions, {violations} violations; {poses} exploration poses, "
           f"{explore_bad} overlay violations")
    assert ok


def test_gradient_correctness():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = M.ModelConfig(dims=(4, 4, 4), widths=(4, 8), time_dim=8, feat_dim=8, point_hidden=(8, 8), groups=2)
    net = M.Denoiser(cfg).double()
    rng = np.random.default_rng(0)
    x0 = M.to_diffusion(rng.integers(0, 2, (2, 4, 4, 4)))
    clouds = [rng.uniform(-0.5, 0.5, (12, 3)), rng.uniform(-0.5, 0.5, (9, 3))]
    noise = (np.array([17, 640]), rng.standard_normal((2, 4, 4, 4)), np.array([False, False]))
    s = sched.linear_schedule(1000)
    err, records = M.grad_check(lambda: M.loss(net, x0, clouds, s, None, M.TrainConfig(), noise=noise),
                                net.parameters(), n_samples=200)
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and len(records) >= 200 and dt < 120
    record("gradient correctness", ok, f"max rel err {err:.2e} (<1e-4) over {len(records)} params, "
                                       f"float64, time={dt:.1f}s")
    assert ok


def test_training_sanity(desk_run):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    spec, grid = sg.generate_scene(0)
    smp = next(sg.scene_samples(0, spec, grid, sg.DatasetParams(), 0))
    x0 = M.to_diffusion(smp.ground_truth.values)
    B = 8
    tc = M.TrainConfig(batch_size=B, lr_max=2e-3, warmup_steps=50, total_steps=500, cond_dropout=0.0)
    net = M.Denoiser()
    opt = M.make_optimizer(net, tc)
    s = sched.linear_schedule(1000)
    losses, reached = [], None
    for step in range(500):
        losses.append(M.train_step(net, opt, np.stack([x0] * B), [smp.conditioning_cloud] * B, s,
                                   M.step_rng(0, step), tc, step))
        # single-batch losses swing with the random timestep; judge a 50-step mean
        if step >= 49 and reached is None and np.mean(losses[-50:]) < 0.05:
            reached = step + 1
    overfit_t = time.perf_counter() - t0

    cfg, times = desk_run
    hist = json.loads((P.checkpoint_dir(cfg) / "manifest.json").read_text())["extra"]["history"]
    ratio = hist[29] / hist[0]
    ok = reached is not None and len(hist) >= 30 and ratio < 0.5 and times["train"] < 20 * 60
    record("training sanity", ok,
           f"overfit 50-step mean < 0.05 at step {reached} (<=500, final {np.mean(losses[-50:]):.4f}, "
           f"{overfit_t:.0f}s); desk epoch30/epoch1 = {hist[29]:.4f}/{hist[0]:.4f} = {ratio:.3f} (<0.5), "
           f"train time {times['train'] / 60:.1f} min")
    assert ok


def test_raycast_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        o = rng.uniform(-1, 1, 3)
        d = random_unit(rng)
        r = rng.uniform(0.05, 0.6)
        vs = float(rng.choice([0.05, 0.1, 0.2]))
        if voxel.raycast(o, d, r, vs) != dense_ray_cells(o, d, r, vs):
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0
    record("ray-cast oracle equivalence", ok and dt < 10,
           f"{mismatches}/1000 mismatches, time={dt:.1f}s (<10s)")
    assert ok and dt < 10


def test_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    a = rng.normal(size=(400, 16))
    self_fid = abs(MT.fid(a, a))

    # d=16 with a clear mean shift: across 100 seeds the estimator's spread at
    # n=5000 is 0.5% (worst 1.4%), so 2% tests the implementation, not the draw
    d, n = 16, 5000
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    la, lb = rng.uniform(0.5, 2, d), rng.uniform(0.5, 4, d)
    mu = rng.normal(size=d) * 3.0
    A = rng.normal(size=(n, d)) * np.sqrt(la) @ q.T
    B = rng.normal(size=(n, d)) * np.sqrt(lb) @ q.T + mu
    exact = mu @ mu + np.sum((np.sqrt(la) - np.sqrt(lb)) ** 2)
    gauss_rel = abs(MT.fid(A, B) - exact) / exact

    X, Y = rng.normal(size=(1000, 32)), rng.normal(size=(1000, 32))
    pool = np.concatenate([X, Y])
    null = []
    for _ in range(40):
        p = rng.permutation(2000)
        null.append(MT.kid(pool[p[:1000]], pool[p[1000:]]))
    kz = abs(MT.kid(X, Y) - np.mean(null)) / np.std(null, ddof=1)

    g = rng.integers(0, 2, (8, 8, 8))
    h = rng.integers(0, 2, (8, 8, 8))
    iou_ok = (MT.iou(g, g) == 1.0 and MT.iou(g, 1 - g) == 0.0 and MT.iou(g, h) == MT.iou(h, g)
              and MT.iou(np.zeros_like(g), np.zeros_like(g)) == 1.0)
    dt = time.perf_counter() - t0
    ok = self_fid < 1e-8 and gauss_rel < 0.02 and kz < 3 and iou_ok and dt < 60
    record("metric oracles", ok, f"fid(A,A)={self_fid:.1e} (<1e-8); gaussian rel err {gauss_rel:.4f} (<0.02); "
                                 f"kid null z={kz:.2f} (<3); iou identities={iou_ok}; time={dt:.1f}s")
    assert ok


def test_directional_ss_beats_baseline(desk_run):
    cfg, times = desk_run
    summary = json.loads((cfg.root / "summary.json").read_text())
    ss, bl = summary["pooled"]
    ok = ss["fid"] < bl["fid"] and ss["kid_x1000"] < bl["kid_x1000"]
    scenes = list(summary["per_scene"])
    total = sum(times.values())
    detail = (f"pooled over scenes {scenes} ({ss['n_samples']} poses): FID SS {ss['fid']:.4f} vs BL "
              f"{bl['fid']:.4f}; KIDx1000 SS {ss['kid_x1000']:.4f} vs BL {bl['kid_x1000']:.4f}; "
              f"end-to-end {total / 60:.1f} min")
    if not ok:
        print(P.format_table(summary))
        print(json.dumps(summary, indent=2, default=float))
    record("directional SS < BL ordering", ok and len(scenes) >= 2 and total < 45 * 60, detail)
    assert ok and len(scenes) >= 2


def test_vp_vo_trend(desk_run):
    cfg, _ = desk_run
    trend = []
    for sid in P._scene_ids(cfg):
        recs = [json.loads(l) for l in (P.explore_dir(cfg) / str(sid) / "metrics.jsonl").read_text().splitlines()]
        series = [r["vp_vo"] for r in recs]
        first = next(v for v in series if v is not None)
        trend.append((sid, first, series[-1], recs[-1]["mask_fraction"]))
        full = [r for r in recs if r["mask_fraction"] == 1.0]
        assert all(r["vp_vo"] == 1.0 for r in full)

    # fully observed region: prediction must equal the known map
    net = P.load_model(cfg)
    smp = sg.load_samples(P.dataset_dir(cfg), "test")[3]
    known = M.to_diffusion(smp.ground_truth.values)
    ones = np.ones(net.config.dims, np.uint8)
    region = voxel.LocalRegion(smp.pose, net.config.dims, (0, 0, 0), voxel.VoxelGrid(known), voxel.VoxelGrid(ones))
    out = S.sample(net, P.training_schedule(cfg), region, smp.conditioning_cloud, cfg.sampler)
    full_ratio = MT.vp_vo(out)
    ok = all(f > l for _, f, l, _ in trend) and full_ratio == 1.0
    record("v_p/v_o trend", ok, "; ".join(f"scene {s}: {f:.3f} -> {l:.3f} (final mask {m:.3f})"
                                         for s, f, l, m in trend) + f"; mask=1 ratio {full_ratio}")
    assert ok


def test_ablation_sweep_shape(desk_run):
    cfg, _ = desk_run
    rows = list(csv.DictReader((cfg.root / "curves.csv").open()))
    info = json.loads((cfg.root / "ablation.json").read_text())
    ks = [int(r["value"]) for r in rows if r["axis"] == "steps"]
    ss = [float(r["value"]) for r in rows if r["axis"] == "guidance"]
    grid = sorted(r["value"] for r in rows if r["axis"] == "cond_inpaint")
    finite = all(math.isfinite(float(r["fid"])) and math.isfinite(float(r["kid_x1000"])) for r in rows)
    ok = (ks == list(cfg.ablate.steps) and ss == list(cfg.ablate.guidance) and 0.0 in ss
          and grid == ["00", "01", "10", "11"] and finite and "fid_s0_minus_s3" in info)
    record("ablation sweep shape", ok, f"K={ks}, s={ss}, cond/inpaint={grid}; "
                                        f"FID(s=0) - FID(s=3) = {info.get('fid_s0_minus_s3', float('nan')):.4f}")
    assert ok
