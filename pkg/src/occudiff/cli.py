"""Command line entry point: ``occudiff gen|train|explore|eval|ablate --config <path>``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("occudiff")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occudiff", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen", "train", "explore", "eval", "ablate"])
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--threads", type=int, default=1, help="upper bound on internal parallelism")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and shapes without writing")
    p.add_argument("--scene", type=int, action="append", help="explore/ablate only this scene (repeatable)")
    p.add_argument("--axis", action="append", choices=["steps", "guidance", "cond_inpaint"],
                   help="ablation axis to sweep (repeatable; default all)")
    p.add_argument("--epochs", type=int, help="train at most this many further epochs")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def load_config(path, seed=None) -> cfgmod.RunConfig:
    """Validate the config; a relative ``workdir`` is taken relative to the config file."""
    cfg = cfgmod.load(path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    wd = Path(cfg.workdir)
    if not wd.is_absolute():
        cfg = dataclasses.replace(cfg, workdir=str(Path(path).resolve().parent / wd))
    return cfg


def _write_config(cfg: cfgmod.RunConfig) -> None:
    cfg.root.mkdir(parents=True, exist_ok=True)
    (cfg.root / "config.json").write_text(cfg.dumps())


def run(args) -> int:
    try:
        cfg = load_config(args.config, args.seed)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    import torch

    torch.set_num_threads(args.threads)
    try:
        if args.command == "gen":
            out = pipeline.cmd_gen(cfg, force=args.force, dry_run=args.dry_run)
            if not args.dry_run:
                _write_config(cfg)
            print(json.dumps({"counts": out["counts"]}))
        elif args.command == "train":
            pipeline.cmd_train(cfg, resume=not args.force, dry_run=args.dry_run, epochs=args.epochs)
        elif args.command == "explore":
            if args.dry_run:
                pipeline.load_model(cfg)
            else:
                pipeline.cmd_explore(cfg, scenes=args.scene, threads=args.threads)
        elif args.command == "eval":
            summary = pipeline.evaluate_directory(cfg) if args.dry_run else pipeline.cmd_eval(cfg)
            print(pipeline.format_table(summary))
        elif args.command == "ablate":
            if args.scene:
                cfg = dataclasses.replace(cfg, ablate=dataclasses.replace(cfg.ablate, scene=args.scene[0]))
            if args.dry_run:
                pipeline.load_model(cfg)
            else:
                for row in pipeline.cmd_ablate(cfg, axes=args.axis):
                    print(f"{row['axis']:12} {str(row['value']):>5}  fid {row['fid']:.4f}  "
                          f"kid x1000 {row['kid_x1000']:.4f}")
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except pipeline.MissingArtifacts as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # any abort surfaces as exit code 3 with the diagnostic
        log.debug("abort", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
