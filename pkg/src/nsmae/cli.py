"""Command-line entry point: ``nsmae <subcommand> ...``.

Exit codes: 0 success, 1 a check failed its tolerance, 2 bad configuration
or unreadable input, 3 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np
import yaml

from .checkpoint import CheckpointError
from .config import Config, ConfigError, dump_config, load_config, make_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

ABLATION_SETTINGS = {
    "color": ["color"],
    "color+dper": ["color", "depth_per"],
    "color+dbev": ["color", "depth_bev"],
    "all": ["color", "depth_per", "depth_bev"],
}


class UsageError(Exception):
    pass


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else make_config()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected key=value")
        overrides[key.strip()] = yaml.safe_load(value)
    if getattr(args, "out", None):
        overrides["output.dir"] = args.out
    return make_config({**cfg, **overrides}) if overrides else cfg


def _out_dir(cfg: Config) -> str:
    d = cfg.output_dir
    os.makedirs(d, exist_ok=True)
    return d


def _say(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ subcommands


def cmd_pretrain(args) -> int:
    from .report import plot_training
    from .trainer import pretrain

    cfg = _config(args)
    out = _out_dir(cfg)
    dump_config(cfg, os.path.join(out, "config.yaml"))
    res = pretrain(cfg, out_dir=out, max_steps=args.max_steps, progress=None if args.quiet else _say)
    plot_training(res.steps, res.epochs, os.path.join(out, "training.png"))
    first, best = res.epochs[0], next(e for e in res.epochs if e["epoch"] == res.best_epoch)
    summary = {
        "checkpoint": res.checkpoint_path,
        "epochs_run": len(res.epochs),
        "best_epoch": res.best_epoch,
        "early_stopped": res.stopped_early,
        "seconds": round(res.seconds, 2),
        "val_total_epoch1": first["total"],
        "val_total_best": best["total"],
        "ratio": {k: best[k] / first[k] if first[k] else float("nan") for k in ("total", "color", "depth_per", "depth_bev")},
    }
    _say(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_render(args) -> int:
    from .data import make_sample
    from .report import plot_frame, render_frame, write_frame_render
    from .scene import generate_scene
    from .trainer import load_model

    model = load_model(args.checkpoint)
    cfg = model.cfg
    out = args.out or os.path.join(cfg.output_dir, "render")
    bounds = (cfg["scene.bounds_lo"], cfg["scene.bounds_hi"])
    sample = make_sample(generate_scene(args.scene_seed, cfg["scene.n_objects"], bounds), model.geom, cfg)
    r = render_frame(model, sample, args.mask_ratio, args.mask_ratio, args.mask_seed)
    tag = f"scene{args.scene_seed}_mask{args.mask_ratio:g}"
    paths = write_frame_render(r, out, tag)
    plot_frame(r, os.path.join(out, f"{tag}.png"), f"scene {args.scene_seed}, mask ratio {args.mask_ratio:g}")
    objective = sum(model.weights.coefficient(t) * r.errors[t] for t in cfg["loss.targets"])
    summary = {
        "mask_ratio": args.mask_ratio,
        "errors": r.errors,
        "reconstruction_error": sum(r.errors.values()),
        "objective": objective,
        "files": sorted(paths.values()),
    }
    _say(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .diagnostics import pipeline_grad_check

    cfg = _config(args)
    res = pipeline_grad_check(cfg, n_coords=args.coords, eps=args.eps, seed=args.seed)
    for mod, err in res.per_module.items():
        _say(f"{mod:14s} coords {res.coords_per_module[mod]:4d}  max rel error {err:.3e}")
    _say(f"max relative error {res.max_rel_error:.3e} over {res.n_coords} coordinates ({res.seconds:.1f} s); tolerance {args.tol:g}")
    return EXIT_OK if res.max_rel_error <= args.tol else EXIT_FAIL


def cmd_eval(args) -> int:
    from .data import make_split
    from .trainer import evaluate, load_model

    model = load_model(args.checkpoint)
    count = args.count if args.count is not None else int(model.cfg[f"scene.n_{args.split}"])
    samples = make_split(model.cfg, args.split, model.geom, count)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    ratio = args.mask_ratio
    ev = evaluate(model, samples, ratio, ratio, model.cfg["mask.seed"])
    _say(json.dumps({"split": args.split, "frames": ev.n_frames, "mask_ratio": ratio, "raw": ev.raw, "total": ev.total, "reconstruction_error": ev.reconstruction_error}, indent=2))
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .data import Geometry, make_split
    from .report import plot_transfer
    from .trainer import load_model, transfer_probe

    cfg = load_model(args.checkpoint).cfg  # validates the checkpoint up front
    geom = Geometry.from_config(cfg)
    train, test = make_split(cfg, "train", geom), make_split(cfg, "test", geom)
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    for frac in args.fraction:
        for seed in range(args.seeds):
            pre = transfer_probe(cfg, args.checkpoint, frac, seed, train, test)
            scr = transfer_probe(cfg, None, frac, seed, train, test)
            rows.append({"fraction": frac, "seed": seed, "labeled_frames": pre.n_labeled, "pretrained": pre.miou, "scratch": scr.miou, "gap": pre.miou - scr.miou})
            _say(f"fraction {frac:g} seed {seed}: pretrained {pre.miou:.4f}  scratch {scr.miou:.4f}")
    path = os.path.join(out, "transfer.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plot_transfer(rows, os.path.join(out, "transfer.png"))
    _say(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import Geometry, make_split
    from .report import plot_ablation
    from .trainer import evaluate, pretrain

    cfg = _config(args)
    out = _out_dir(cfg)
    geom = Geometry.from_config(cfg)
    train, val, test = (make_split(cfg, s, geom) for s in ("train", "val", "test"))
    settings = args.settings or list(ABLATION_SETTINGS)
    rows = []
    for name in settings:
        for masking in (True, False):
            run_cfg = cfg.replace(loss__targets=ABLATION_SETTINGS[name], mask__enabled=masking)
            res = pretrain(run_cfg, train, val, geom=geom, renders=False)
            ev = evaluate(res.model, test, args.test_mask_ratio, args.test_mask_ratio, cfg["mask.seed"], targets=list(ABLATION_SETTINGS["all"]))
            row = {"setting": name, "masking": "on" if masking else "off", "targets": "+".join(ABLATION_SETTINGS[name]), **ev.raw, "total_all": ev.total, "best_epoch": res.best_epoch}
            rows.append(row)
            _say(", ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plot_ablation(rows, os.path.join(out, "ablation.png"))
    _say(f"wrote {path}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _config(args)
    if args.write:
        dump_config(cfg, args.write)
    else:
        for k, v in cfg.items():
            _say(f"{k}: {json.dumps(v)}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsmae", description="Masked camera+Lidar pre-training supervised by volume rendering.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML file of dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--out", help="output directory (NSMAE_OUT takes precedence)")

    sp = sub.add_parser("pretrain", help="masked pre-training with validation and early stopping")
    with_config(sp)
    sp.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("render", help="render one scene from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--scene-seed", type=int, default=0)
    sp.add_argument("--mask-ratio", type=float, default=0.0, help="applied to both image patches and voxels")
    sp.add_argument("--mask-seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("grad-check", help="finite-difference check of the full pipeline")
    with_config(sp)
    sp.add_argument("--coords", type=int, default=240)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("eval", help="reconstruction losses of a checkpoint on a split")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=["train", "val", "test"], default="test")
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--mask-ratio", type=float, default=0.0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("transfer", help="occupancy probe: pretrained vs scratch")
    sp.add_argument("checkpoint")
    sp.add_argument("--fraction", type=float, action="append", help="label fraction (repeatable; default 0.1 and 1.0)")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("ablate", help="target x masking grid, one CSV row per run")
    with_config(sp)
    sp.add_argument("--settings", nargs="+", choices=list(ABLATION_SETTINGS))
    sp.add_argument("--test-mask-ratio", type=float, default=0.0)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("config", help="print the effective configuration or write it as YAML")
    with_config(sp)
    sp.add_argument("--write", metavar="PATH")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    from .trainer import TrainingAbort

    args = build_parser().parse_args(argv)
    if getattr(args, "fraction", "unset") is None:
        args.fraction = [0.1, 1.0]
    warnings.simplefilter("ignore", RuntimeWarning)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
