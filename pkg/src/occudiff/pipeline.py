"""End-to-end commands: dataset generation, training, exploration, evaluation, ablation.

Layout under ``config.workdir``::

    config.json
    dataset/        manifest.json, scenes/, samples/
    checkpoint/     manifest.json, weights.bin, loss.csv
    explore/<scene>/  <pose>.{ss,bl,gt,known,mask}.occg, <pose>.pts, metrics.jsonl, timings.jsonl
    summary.json    curves.csv    ablation.json
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import metrics, model as mdl, sampler as smp, scenegen, sched, voxel
from .config import RunConfig

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class MissingArtifacts(PipelineError):
    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing artifacts:\n  " + "\n  ".join(self.missing))


def dataset_dir(cfg: RunConfig) -> Path:
    return cfg.root / "dataset"


def checkpoint_dir(cfg: RunConfig) -> Path:
    return cfg.root / "checkpoint"


def explore_dir(cfg: RunConfig) -> Path:
    return cfg.root / "explore"


def training_schedule(cfg: RunConfig) -> sched.NoiseSchedule:
    T = cfg.train.diffusion_steps
    return sched.linear_schedule(T) if T == 1000 else sched.desk_schedule(T)


def dataset_params(cfg: RunConfig, poses_per_scene=None) -> scenegen.DatasetParams:
    d = cfg.data
    return scenegen.DatasetParams(scene=d.scene, camera=d.camera, region_dims=tuple(cfg.model.dims),
                                  poses_per_scene=poses_per_scene or d.poses_per_scene,
                                  step_length=d.step_length, cloud_cap=d.cloud_cap)


# --------------------------------------------------------------------------
# gen


def cmd_gen(cfg: RunConfig, force: bool = False, dry_run: bool = False) -> dict:
    out = dataset_dir(cfg)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists; pass --force to overwrite")
        if not dry_run:
            shutil.rmtree(out)
    ids = list(range(cfg.data.n_scenes))
    test = [i for i in cfg.data.test_scenes if i in ids]
    if dry_run:
        return {"counts": {"train": (len(ids) - len(test)) * cfg.data.poses_per_scene,
                           "test": len(test) * cfg.data.poses_per_scene}, "dry_run": True}
    manifest = scenegen.write_dataset(out, cfg.seed_for("data"), ids, test, dataset_params(cfg))
    return manifest


# --------------------------------------------------------------------------
# train


def _load_training_arrays(cfg: RunConfig):
    samples = scenegen.load_samples(dataset_dir(cfg), "train")
    if not samples:
        raise PipelineError("training split is empty")
    x0 = np.stack([mdl.to_diffusion(s.ground_truth.values) for s in samples])
    clouds = [s.conditioning_cloud for s in samples]
    return x0, clouds


def _optim_config(cfg: RunConfig, n_samples: int) -> mdl.TrainConfig:
    oc = cfg.train.optim
    steps_per_epoch = math.ceil(n_samples / oc.batch_size)
    total = oc.total_steps if oc.total_steps is not None else oc.epochs * steps_per_epoch
    return mdl.TrainConfig(**{**oc.__dict__, "total_steps": total, "seed": cfg.seed_for("train"),
                              "parameterization": cfg.model.parameterization})


def cmd_train(cfg: RunConfig, resume: bool = True, dry_run: bool = False, epochs: int | None = None) -> list:
    """Train from scratch or resume from the last checkpoint. Returns epoch losses of this call."""
    x0, clouds = _load_training_arrays(cfg)
    tc = _optim_config(cfg, len(x0))
    schedule = training_schedule(cfg)
    ck = checkpoint_dir(cfg)
    torch.manual_seed(cfg.seed_for("init"))
    start_epoch, history = 0, []
    if resume and (ck / "manifest.json").exists():
        model, optimizer, manifest = mdl.load_checkpoint(ck, tc)
        start_epoch = manifest["extra"].get("epoch", -1) + 1
        history = manifest["extra"].get("history", [])
    else:
        model = mdl.Denoiser(cfg.model)
        optimizer = mdl.make_optimizer(model, tc)
    if dry_run:
        with torch.no_grad():
            l = mdl.loss(model, x0[:2], clouds[:2], schedule, np.random.default_rng(0), tc)
        log.info("dry run ok: %d samples, %d parameters, loss %.4f", len(x0), mdl.n_params(model), float(l))
        return []
    end = tc.epochs if epochs is None else min(tc.epochs, start_epoch + epochs)
    if start_epoch >= end:
        return []
    ck.mkdir(parents=True, exist_ok=True)
    loss_csv = ck / "loss.csv"
    if start_epoch == 0 and loss_csv.exists():
        loss_csv.unlink()

    def on_epoch(epoch, mean_loss, step_losses):
        history.append(mean_loss)
        with loss_csv.open("a") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(["epoch", "step", "loss"])
            for b, l in enumerate(step_losses):
                w.writerow([epoch, epoch * len(step_losses) + b, f"{l:.8f}"])
        log.info("epoch %d loss %.5f", epoch, mean_loss)
        if (epoch + 1) % cfg.train.checkpoint_every == 0 or epoch + 1 == end:
            mdl.save_checkpoint(ck, model, optimizer, tc, extra={"epoch": epoch, "history": history})

    new = mdl.train(model, optimizer, x0, clouds, schedule, tc, start_epoch=start_epoch,
                    epochs=end - start_epoch, on_epoch=on_epoch)
    return new


def load_model(cfg: RunConfig):
    ck = checkpoint_dir(cfg)
    if not (ck / "manifest.json").exists():
        raise MissingArtifacts([ck / "manifest.json", ck / "weights.bin"])
    model, _, _ = mdl.load_checkpoint(ck)
    model.eval()
    return model


# --------------------------------------------------------------------------
# explore


def exploration_poses(cfg: RunConfig, spec, grid, scene_id: int) -> list:
    poses = scenegen.plan_trajectory(spec, cfg.seed_for(f"trajectory:{scene_id}"), cfg.explore.step_length, grid)
    if cfg.explore.max_poses is not None and len(poses) > cfg.explore.max_poses:
        poses = poses[:cfg.explore.max_poses]
    if cfg.explore.final_spin:
        poses = poses + scenegen.spin_in_place(poses[-1], cfg.explore.final_spin)
    return poses


def _scene_ids(cfg: RunConfig):
    return list(cfg.explore.scenes) if cfg.explore.scenes is not None else list(cfg.data.test_scenes)


def cmd_explore(cfg: RunConfig, scenes=None, model=None, threads: int = 1) -> dict:
    """Walk each scene's trajectory, integrating scans and predicting at every pose.

    Resumes after the last pose recorded in ``metrics.jsonl``.
    """
    model = model or load_model(cfg)
    schedule = training_schedule(cfg)
    ids = list(scenes if scenes is not None else _scene_ids(cfg))
    if threads > 1 and len(ids) > 1:
        # scenes write disjoint directories, so running them side by side is safe
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda sid: explore_scene(cfg, sid, model, schedule), ids))
        return dict(zip(ids, results))
    return {sid: explore_scene(cfg, sid, model, schedule) for sid in ids}


def explore_scene(cfg: RunConfig, scene_id: int, model, schedule) -> list:
    spec, grid = scenegen.load_scene(dataset_dir(cfg), scene_id)
    poses = exploration_poses(cfg, spec, grid, scene_id)
    d = explore_dir(cfg) / str(scene_id)
    d.mkdir(parents=True, exist_ok=True)
    metrics_path = d / "metrics.jsonl"
    done = []
    if metrics_path.exists():
        done = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
    cam = cfg.data.camera
    dims = tuple(cfg.model.dims)
    occ_map = voxel.OccupancyMap(voxel_size=grid.voxel_size)
    base_seed = cfg.seed_for(f"explore:{scene_id}")
    records = list(done)
    for i, pose in enumerate(poses):
        render = scenegen.render_depth(grid, pose, cam, dims)
        voxel.integrate_scan(occ_map, render.sensor_origin, render.endpoints, render.hit_flags)
        if i < len(done):
            continue
        seed = base_seed ^ i
        cloud = scenegen.subsample_cloud(render.points_local, cfg.data.cloud_cap, seed).astype(np.float32)
        region = voxel.extract_local(occ_map, pose, dims)
        gt = voxel.crop(grid, region.index_origin, dims)
        result = smp.sample(model, schedule, region, cloud, cfg.sampler, seed=seed)
        result.overlay = voxel.merge_prediction(occ_map, region, result.predicted)
        violations = len(result.overlay & occ_map.occupied()) + len(result.overlay & occ_map.free())
        known = region.mask == 1
        preserved = bool(np.array_equal(result.predicted.values[known], (region.values[known] > 0).astype(np.uint8)))
        bl = region.occupied_known()
        origin = region.known_values.origin
        for name, arr in (("ss", result.predicted.values), ("bl", bl), ("gt", gt), ("mask", region.mask)):
            voxel.save_grid(d / f"{i}.{name}.occg", voxel.VoxelGrid(arr.astype(np.uint8), grid.voxel_size, origin))
        voxel.save_grid(d / f"{i}.known.occg", voxel.VoxelGrid(region.values.astype(np.float32), grid.voxel_size, origin))
        scenegen.write_points(d / f"{i}.pts", cloud)
        (d / f"{i}.pose.json").write_text(json.dumps(pose.to_dict()))
        rec = {
            "scene": scene_id, "pose": i,
            "iou_ss": metrics.iou(result.predicted, gt), "iou_bl": metrics.iou(bl, gt),
            "vp_vo": metrics.vp_vo(result) if result.v_o > 0 else None,
            "v_p": result.v_p, "v_o": result.v_o, "novel": len(result.overlay),
            "mask_fraction": region.mask_fraction(),
            "overlay_violations": violations, "known_preserved": preserved,
            "n_points": int(len(cloud)), "seed": int(seed),
        }
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with (d / "timings.jsonl").open("a") as fh:
            fh.write(json.dumps({"pose": i, "mean_step_s": float(np.mean(result.step_times)),
                                 "total_s": float(np.sum(result.step_times))}) + "\n")
        records.append(rec)
    return records


# --------------------------------------------------------------------------
# eval


def _scene_triplets(d: Path):
    recs = [json.loads(l) for l in (d / "metrics.jsonl").read_text().splitlines() if l.strip()]
    missing = [d / f"{r['pose']}.{k}.occg" for r in recs for k in ("ss", "bl", "gt")
               if not (d / f"{r['pose']}.{k}.occg").exists()]
    if missing:
        raise MissingArtifacts(missing)
    load = lambda r, k: voxel.load_grid(d / f"{r['pose']}.{k}.occg").values
    return recs, [load(r, "ss") for r in recs], [load(r, "bl") for r in recs], [load(r, "gt") for r in recs]


def evaluate_directory(cfg: RunConfig, scenes=None) -> dict:
    root = explore_dir(cfg)
    scenes = scenes if scenes is not None else _scene_ids(cfg)
    missing = [root / str(s) / "metrics.jsonl" for s in scenes if not (root / str(s) / "metrics.jsonl").exists()]
    if missing:
        raise MissingArtifacts(missing)
    emb = metrics.GridEmbedder(tuple(cfg.model.dims), cfg.eval.embedder_seed, cfg.eval.embed_dim)
    per_scene = {}
    pooled = {"ss": [], "bl": [], "gt": [], "ids": [], "vpvo": []}
    for s in scenes:
        recs, ss, bl, gt = _scene_triplets(root / str(s))
        vpvo = [r["vp_vo"] if r["vp_vo"] is not None else float("nan") for r in recs]
        ids = [(s, r["pose"]) for r in recs]
        rep = metrics.evaluate_run(ss, bl, gt, emb, ids=ids, vp_vo_series=vpvo)
        per_scene[str(s)] = [r.to_dict() for r in rep]
        pooled["ss"] += ss
        pooled["bl"] += bl
        pooled["gt"] += gt
        pooled["ids"] += ids
        pooled["vpvo"] += vpvo
    ss_rep, bl_rep = metrics.evaluate_run(pooled["ss"], pooled["bl"], pooled["gt"], emb, ids=pooled["ids"],
                                          vp_vo_series=pooled["vpvo"])
    return {"pooled": [ss_rep.to_dict(), bl_rep.to_dict()], "per_scene": per_scene,
            "embedder_seed": cfg.eval.embedder_seed, "config": cfg.to_dict()}


def cmd_eval(cfg: RunConfig) -> dict:
    summary = evaluate_directory(cfg)
    (cfg.root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_nan_safe))
    return summary


def _nan_safe(x):
    return float(x)


def format_table(summary: dict) -> str:
    scenes = list(summary["per_scene"])
    head = "Method | " + " | ".join(f"scene {s} FID  KIDx1000" for s in scenes) + " | pooled FID  KIDx1000"
    lines = [head, "-" * len(head)]
    for row in (0, 1):
        name = summary["pooled"][row]["name"]
        cells = [f"{summary['per_scene'][s][row]['fid']:10.4f} {summary['per_scene'][s][row]['kid_x1000']:9.4f}"
                 for s in scenes]
        p = summary["pooled"][row]
        lines.append(f"{name:6} | " + " | ".join(cells) + f" | {p['fid']:10.4f} {p['kid_x1000']:9.4f}")
    lines.append(f"embedder seed: {summary['embedder_seed']}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ablate


def _load_pose_inputs(d: Path, stride: int):
    recs = [json.loads(l) for l in (d / "metrics.jsonl").read_text().splitlines() if l.strip()]
    out = []
    for r in recs[::stride]:
        i = r["pose"]
        known = voxel.load_grid(d / f"{i}.known.occg")
        mask = voxel.load_grid(d / f"{i}.mask.occg")
        pose = voxel.Pose.from_dict(json.loads((d / f"{i}.pose.json").read_text()))
        origin = np.asarray(known.origin)
        lo = tuple(int(v) for v in np.round(origin / known.voxel_size))
        region = voxel.LocalRegion(pose, known.dims, lo,
                                   voxel.VoxelGrid(known.values.astype(np.float64), known.voxel_size, known.origin),
                                   mask)
        out.append((i, region, scenegen.read_points(d / f"{i}.pts"),
                    voxel.load_grid(d / f"{i}.gt.occg").values, r["seed"]))
    return out


def ablation_settings(cfg: RunConfig) -> list:
    base = cfg.sampler
    rows = [("steps", k, dict(steps=k)) for k in cfg.ablate.steps]
    rows += [("guidance", s, dict(guidance=s)) for s in cfg.ablate.guidance]
    for cond in (True, False):
        for inp in (True, False):
            rows.append(("cond_inpaint", f"{int(cond)}{int(inp)}", dict(condition=cond, inpaint=inp)))
    out = []
    for axis, value, overrides in rows:
        sc = smp.SamplerConfig(**{**base.__dict__, **overrides})
        out.append((axis, value, sc))
    return out


def cmd_ablate(cfg: RunConfig, axes=None, model=None) -> list:
    """Sweep sampler settings over stored exploration poses and write ``curves.csv``."""
    model = model or load_model(cfg)
    schedule = training_schedule(cfg)
    scene = cfg.ablate.scene if cfg.ablate.scene is not None else _scene_ids(cfg)[0]
    d = explore_dir(cfg) / str(scene)
    if not (d / "metrics.jsonl").exists():
        raise MissingArtifacts([d / "metrics.jsonl"])
    inputs = _load_pose_inputs(d, cfg.ablate.pose_stride)
    emb = metrics.GridEmbedder(tuple(cfg.model.dims), cfg.eval.embedder_seed, cfg.eval.embed_dim)
    gt_feats = emb.embed_many([g for *_, g, _ in inputs])
    rows = []
    for axis, value, sc in ablation_settings(cfg):
        if axes and axis not in axes:
            continue
        t0 = time.perf_counter()
        preds = [smp.sample(model, schedule, region, cloud, sc, seed=seed).predicted.values
                 for _, region, cloud, _, seed in inputs]
        feats = emb.embed_many(preds)
        reg = len(preds) < emb.dim + 1
        rows.append({
            "axis": axis, "value": value, "steps": sc.steps, "guidance": sc.guidance,
            "condition": int(sc.condition), "inpaint": int(sc.inpaint),
            "fid": metrics.fid(feats, gt_feats, regularize=reg),
            "kid_x1000": 1000.0 * metrics.kid(feats, gt_feats),
            "mean_iou": float(np.mean([metrics.iou(p, g) for p, (_, _, _, g, _) in zip(preds, inputs)])),
            "n": len(preds), "regularized": int(reg),
        })
        log.info("ablate %s=%s fid %.4f kid %.4f (%.1fs)", axis, value, rows[-1]["fid"], rows[-1]["kid_x1000"],
                 time.perf_counter() - t0)
    with (cfg.root / "curves.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    g = {r["guidance"]: r["fid"] for r in rows if r["axis"] == "guidance"}
    info = {"scene": scene, "n_poses": len(inputs), "rows": len(rows)}
    if 0.0 in g and 3.0 in g:
        info["fid_s0_minus_s3"] = g[0.0] - g[3.0]
    (cfg.root / "ablation.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return rows
