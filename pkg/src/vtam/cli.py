"""Command-line interface.

Subcommands mirror the pipeline stages plus standalone utilities. All
training commands take --config/--run-dir; a copy of the config lands in
the run directory so `vtam verify` can recheck artifact hashes later.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="TOML config (defaults to built-in desk values)")
    p.add_argument("--run-dir", type=Path, default=Path("runs/default"))


def _load(args):
    from .config import load_config, write_default_config
    run_dir = args.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    stored = run_dir / "config.toml"
    if args.config is not None:
        cfg = load_config(args.config)
        if args.config.resolve() != stored.resolve():
            shutil.copyfile(args.config, stored)
    elif stored.exists():
        cfg = load_config(stored)
    else:
        cfg = write_default_config(stored)
    return cfg, run_dir


def main(argv=None):
    parser = argparse.ArgumentParser(prog="vtam",
                                     description="desk-scale visuo-tactile action model")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("init-config", help="write the canonical default config")
    p.add_argument("path", type=Path, nargs="?", default=Path("default.toml"))

    for name, doc in (("gen-data", "generate the synthetic dataset"),
                      ("train-codec", "stage 0: frame codec"),
                      ("train-stage1", "stage I: world backbone"),
                      ("eval", "closed-loop evaluation of a trained variant"),
                      ("ablate", "train/evaluate all variants and report"),
                      ("predict", "future-frame prediction grids"),
                      ("verify", "recheck artifact config hashes"),
                      ("pipeline", "run every training stage in order")):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        if name == "eval":
            p.add_argument("--variant", default="full")
            p.add_argument("--n-trials", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
        if name == "ablate":
            p.add_argument("--n-trials", type=int, default=None)
        if name == "predict":
            p.add_argument("--episode", type=int, default=None)

    p = sub.add_parser("train-stage2", help="stage II: action expert")
    _add_common(p)
    p.add_argument("--variant", default="full",
                   choices=["full", "no_force_reg", "vision_only", "late_fusion"])

    p = sub.add_parser("force", help="virtual force between two PGM frames")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--cur", type=Path, required=True)
    p.add_argument("--overlay", type=Path, default=None,
                   help="write the current frame with a shear arrow")

    args = parser.parse_args(argv)

    if args.cmd == "init-config":
        from .config import write_default_config
        write_default_config(args.path)
        print(f"wrote {args.path}")
        return 0

    if args.cmd == "force":
        from .pgm import read_pgm, write_pgm
        from .tactile import draw_force_overlay, optical_flow, virtual_force
        ref, _ = read_pgm(args.ref)
        cur, _ = read_pgm(args.cur)
        force = virtual_force(optical_flow(ref, cur))
        print(f"{force.f_x:.6f} {force.f_y:.6f} {force.f_z:.6f}")
        if args.overlay:
            write_pgm(args.overlay, draw_force_overlay(cur, force))
        return 0

    from . import pipeline as pl
    cfg, run_dir = _load(args)

    if args.cmd == "gen-data":
        pl.stage_data(cfg, run_dir)
        return 0
    if args.cmd == "train-codec":
        episodes, _, _ = pl.stage_data(cfg, run_dir)
        pl.stage_codec(cfg, run_dir, episodes)
        return 0
    if args.cmd == "train-stage1":
        episodes, _, aux = pl.stage_data(cfg, run_dir)
        codec_params, lstats = pl.stage_codec(cfg, run_dir, episodes)
        cache = pl.build_latent_cache(cfg, episodes, codec_params, lstats)
        pl.stage_stage1(cfg, run_dir, cache, name="stage1")
        return 0
    if args.cmd == "train-stage2":
        art = pl.run_pipeline(cfg, run_dir, variants=[args.variant])
        return 0
    if args.cmd == "pipeline":
        pl.run_pipeline(cfg, run_dir)
        return 0
    if args.cmd == "eval":
        art = pl.run_pipeline(cfg, run_dir, variants=[args.variant])
        out = run_dir / "eval" / args.variant
        out.mkdir(parents=True, exist_ok=True)
        policy = pl.make_policy(cfg, art, args.variant,
                                base_seed=args.seed or cfg.eval.seed)
        report, _ = pl.evaluate_policy(
            cfg, policy, args.n_trials or cfg.eval.n_trials,
            args.seed or cfg.eval.seed, out_dir=out,
            strip_every=cfg.eval.frame_strip_every, config_hash=art["config_hash"])
        print(f"success {report['success_rate']:.2%} break {report['break_rate']:.2%} "
              f"slip {report['slip_rate']:.2%} over {report['n_trials']} trials")
        return 0
    if args.cmd == "ablate":
        art = pl.run_pipeline(cfg, run_dir)
        pl.ablate(cfg, run_dir, art, n_trials=args.n_trials)
        return 0
    if args.cmd == "predict":
        art = pl.run_pipeline(cfg, run_dir, variants=["full"])
        pl.predict_visualize(cfg, run_dir, art, episode_index=args.episode)
        return 0
    if args.cmd == "verify":
        problems = pl.verify_run(run_dir, cfg)
        return 1 if problems else 0
    raise AssertionError(f"unhandled command {args.cmd}")


if __name__ == "__main__":
    sys.exit(main())
