"""Command-line entry point: ``screenseg {gen-data,train,eval,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .synthdata import DatasetError, dataset_checksum, generate_dataset

log = logging.getLogger("screenseg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CACHE_ENV = "SCREENSEG_CACHE"


def _checkpoint_root(args) -> Path:
    if getattr(args, "checkpoints", None):
        return Path(args.checkpoints)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(args.out)


def _prepare(args, name) -> RunConfig:
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = RunConfig.load(args.config, seed=args.seed) if args.config else RunConfig(seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / f"{name}_config.json")
    if args.deterministic:
        from .experiment import set_deterministic

        set_deterministic(True)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _prepare(args, "gen_data")
    out = Path(args.out)
    before = None
    if (out / "manifest.csv").is_file():
        try:
            before = dataset_checksum(out)
        except DatasetError:
            before = None
    manifest = generate_dataset(cfg.phantom, out)
    after = dataset_checksum(out)
    n_test = sum(r["split"] == "test" for r in manifest.rows)
    print(f"wrote {len(manifest)} frames ({len(manifest) - n_test} train, {n_test} test) to {manifest.path}")
    print(f"checksum {after}")
    if before is not None:
        print("dataset unchanged" if before == after else "dataset changed")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import load_frames, train_frame_classifier, train_segmenters
    from .train import save_run_config

    cfg = _prepare(args, "train")
    frames = load_frames(cfg)
    root = _checkpoint_root(args)
    root.mkdir(parents=True, exist_ok=True)
    save_run_config(Path(args.out) / "run.json", config=cfg.to_dict(), target=args.target, checkpoints=str(root))
    if args.target == "seg":
        hist = train_segmenters(cfg, frames, root, jobs=args.jobs, deterministic=args.deterministic)
        for (s, l, k), h in sorted(hist.items()):
            print(f"seg {s} {l} fold{k}: best val_dice {max(r['val_dice'] for r in h):.4f}")
    else:
        _, h = train_frame_classifier(cfg, frames, root)
        print(f"clf: best val_acc {max(r['val_acc'] for r in h):.4f}")
    print(f"checkpoints in {root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import evaluate_cells, load_frames
    from .screen_eval import write_frame_csv, write_json, write_summary_csv

    cfg = _prepare(args, "eval")
    frames = load_frames(cfg)
    rows, reports = evaluate_cells(cfg, frames, _checkpoint_root(args))
    out = Path(args.out)
    write_summary_csv(rows, out / "eval_summary.csv")
    (out / "frames").mkdir(exist_ok=True)
    for (s, l, t), (w, wo) in reports.items():
        write_frame_csv(w, out / "frames" / f"{s.replace(':', '-')}__{l}__t{t:g}.csv")
    for (s, l), wo in {(k[0], k[1]): v[1] for k, v in reports.items()}.items():
        write_frame_csv(wo, out / "frames" / f"{s.replace(':', '-')}__{l}__seg_only.csv")
    write_json({"cells": rows}, out / "eval_summary.json")
    for r in rows:
        p = "n/a" if r["p_value"] is None else f"{r['p_value']:.3f}"
        w = "n/a" if r["mean_dice_w"] is None else f"{r['mean_dice_w']:.3f}"
        wo = "n/a" if r["mean_dice_wo"] is None else f"{r['mean_dice_wo']:.3f}"
        print(f"{r['strategy']:>14} {r['loss']:>8} t={r['threshold']:g}  w {w}  w/o {wo}  p {p}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import load_frames, sweep_cells
    from .plots import plot_dice_vs_threshold, plot_fp_fn, read_sweep_csv
    from .screen_eval import write_json, write_summary_csv

    cfg = _prepare(args, "sweep")
    frames = load_frames(cfg)
    results = sweep_cells(cfg, frames, _checkpoint_root(args))
    out = Path(args.out)
    rows = [r for res in results for r in res.rows()]
    write_summary_csv(rows, out / "sweep.csv")
    write_json({f"{res.strategy}__{res.loss}": res.table() for res in results}, out / "sweep_summary.json")
    rows = read_sweep_csv(out / "sweep.csv")
    plot_dice_vs_threshold(rows, out / "dice_vs_threshold.png")
    plot_fp_fn(rows, out / "fp_fn_rates.png")
    for res in results:
        for r in res.table():
            md = "n/a" if r["mean_dice"] is None else f"{r['mean_dice']:.3f}"
            print(f"{res.strategy:>14} {res.loss:>8} t={r['threshold']}  FPR {r['fpr']:.3f}  FNR {r['fnr']:.3f}  FP area {r['fp_area']:.4f}  Dice {md}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel fold trainings")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="screenseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic phantom dataset").set_defaults(func=cmd_gen_data)
    t = sub.add_parser("train", parents=[common], help="train segmenters (per fold) or the classifier")
    t.add_argument("--target", choices=("seg", "clf"), required=True)
    t.add_argument("--checkpoints", help=f"checkpoint root (default ${CACHE_ENV} or --out)")
    t.set_defaults(func=cmd_train)
    for name, func, text in (("eval", cmd_eval, "with/without screening summary"), ("sweep", cmd_sweep, "threshold sweep + plots")):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("--checkpoints", help=f"checkpoint root (default ${CACHE_ENV} or --out)")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, RuntimeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
