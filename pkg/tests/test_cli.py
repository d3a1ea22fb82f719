import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from occudiff import cli, voxel
from occudiff.config import RunConfig

TINY = {
    "seed": 3,
    "workdir": "run",
    "data": {"n_scenes": 3, "test_scenes": [0], "poses_per_scene": 4,
             "camera": {"width": 16, "height": 16}, "cloud_cap": 128},
    "model": {"widths": [4, 8], "time_dim": 16, "feat_dim": 16, "point_hidden": [16, 16], "groups": 4},
    "train": {"optim": {"batch_size": 4, "epochs": 2, "warmup_steps": 1}, "checkpoint_every": 1},
    "sampler": {"steps": 2},
    "explore": {"max_poses": 4, "final_spin": 0},
    "ablate": {"steps": [1, 2], "guidance": [0.0, 1.0], "pose_stride": 1},
}


def write_config(path, **over):
    doc = json.loads(json.dumps(TINY))
    doc.update(over)
    path.write_text(json.dumps(doc))
    return path


def tree_bytes(root, skip=()):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "cfg.json")
    codes = [cli.main([c, "--config", str(cfg), "-q"]) for c in ("gen", "train", "explore", "eval", "ablate")]
    return d, cfg, codes


def test_pipeline_exit_codes_and_artifacts(full_run):
    d, _, codes = full_run
    assert codes == [0, 0, 0, 0, 0]
    run = d / "run"
    for rel in ("config.json", "dataset/manifest.json", "checkpoint/manifest.json", "checkpoint/weights.bin",
                "checkpoint/loss.csv", "explore/0/metrics.jsonl", "summary.json", "curves.csv", "ablation.json"):
        assert (run / rel).exists(), rel


def test_gen_reports_counts_and_disjoint_splits(full_run):
    d, _, _ = full_run
    m = json.loads((d / "run" / "dataset" / "manifest.json").read_text())
    assert m["counts"] == {"train": 8, "test": 4}
    assert not set(m["splits"]["train"]) & set(m["splits"]["test"])


def test_gen_refuses_overwrite_without_force(full_run, tmp_path):
    _, cfg, _ = full_run
    assert cli.main(["gen", "--config", str(cfg), "-q"]) == 3


def test_gen_same_seed_same_manifest(tmp_path):
    a = write_config(tmp_path / "a.json", workdir="a")
    b = write_config(tmp_path / "b.json", workdir="b")
    assert cli.main(["gen", "--config", str(a), "--seed", "7", "-q"]) == 0
    assert cli.main(["gen", "--config", str(b), "--seed", "7", "-q"]) == 0
    assert tree_bytes(tmp_path / "a" / "dataset") == tree_bytes(tmp_path / "b" / "dataset")
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 7


def test_dry_run_writes_nothing(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["gen", "--config", str(cfg), "--dry-run", "-q"]) == 0
    assert not (tmp_path / "run").exists()


def test_train_dry_run_validates_without_writing(full_run):
    d, cfg, _ = full_run
    before = tree_bytes(d / "run" / "checkpoint")
    assert cli.main(["train", "--config", str(cfg), "--dry-run", "-q"]) == 0
    assert tree_bytes(d / "run" / "checkpoint") == before


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sampler": {"steps": "many"}}))
    assert cli.main(["gen", "--config", str(bad)]) == 2
    assert cli.main(["gen", "--config", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["frobnicate", "--config", str(bad)]) == 2
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["gen", "--config", str(cfg), "--threads", "0"]) == 2


def test_missing_artifacts_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["eval", "--config", str(cfg), "-q"]) == 3
    assert "missing" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(cfg), "-q"]) == 3


def test_loss_csv_and_resume(full_run):
    d, _, _ = full_run
    rows = list(csv.DictReader((d / "run" / "checkpoint" / "loss.csv").open()))
    assert len(rows) == 2 * 2 and all(np.isfinite(float(r["loss"])) for r in rows)
    ck = json.loads((d / "run" / "checkpoint" / "manifest.json").read_text())
    assert ck["extra"]["epoch"] == 1 and len(ck["extra"]["history"]) == 2


def test_explore_records(full_run):
    d, _, _ = full_run
    recs = [json.loads(l) for l in (d / "run" / "explore" / "0" / "metrics.jsonl").read_text().splitlines()]
    assert [r["pose"] for r in recs] == list(range(4))
    assert all(r["overlay_violations"] == 0 and r["known_preserved"] for r in recs)
    g = voxel.load_grid(d / "run" / "explore" / "0" / "0.ss.occg")
    assert g.dims == (16, 16, 16)


def test_explore_is_byte_deterministic(full_run, tmp_path):
    d, _, _ = full_run
    import shutil
    shutil.copytree(d / "run" / "dataset", tmp_path / "run" / "dataset")
    shutil.copytree(d / "run" / "checkpoint", tmp_path / "run" / "checkpoint")
    cfg = write_config(tmp_path / "cfg.json")
    assert cli.main(["explore", "--config", str(cfg), "-q"]) == 0
    skip = ("timings.jsonl",)
    assert tree_bytes(tmp_path / "run" / "explore", skip) == tree_bytes(d / "run" / "explore", skip)


def test_eval_summary(full_run, capsys):
    d, cfg, _ = full_run
    s = json.loads((d / "run" / "summary.json").read_text())
    assert s["embedder_seed"] == RunConfig().eval.embedder_seed
    assert [r["name"] for r in s["pooled"]] == ["SS", "BL"]
    assert cli.main(["eval", "--config", str(cfg), "-q"]) == 0
    out = capsys.readouterr().out
    assert "SS" in out and "BL" in out and "embedder seed" in out


def test_ablation_rows(full_run):
    d, _, _ = full_run
    rows = list(csv.DictReader((d / "run" / "curves.csv").open()))
    axes = [r["axis"] for r in rows]
    assert axes.count("steps") == 2 and axes.count("guidance") == 2 and axes.count("cond_inpaint") == 4
    assert "0.0" in [r["value"] for r in rows if r["axis"] == "guidance"]
    assert any(r["inpaint"] == "0" for r in rows)
    info = json.loads((d / "run" / "ablation.json").read_text())
    assert info["rows"] == 8


def test_console_script_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    r = subprocess.run([sys.executable, "-m", "occudiff.cli", "gen", "--config", str(cfg), "--dry-run", "-q"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["counts"] == {"train": 8, "test": 4}
