"""Command-line interface.

Subcommands: train, generate, evaluate, synth-data, ablate. Exit codes:
0 success, 2 configuration error, 3 input/data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
from PIL import Image

from .config import load_config
from .dataset import synth_dataset
from .errors import (CamogenError, ConfigError, DimensionError, InputError,
                     NumericError)
from .imageops import from_uint8, to_uint8
from .pipeline import (TrainState, evaluate_run, generate_image, make_sample,
                       run_ablation, run_training)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camogen",
        description="Train, sample and evaluate a foreground-guided "
                    "camouflaged-image generator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run two-stage training from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume stage 2 from")

    p = sub.add_parser("generate", help="generate a camouflaged image for one object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="source RGB PNG")
    p.add_argument("--mask", required=True, help="8-bit gray mask PNG (>127 = object)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("evaluate", help="generate per-sample images and report metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report file path")

    p = sub.add_parser("synth-data", help="write a deterministic synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--area-min", type=float, default=1.0 / 256.0)
    p.add_argument("--area-max", type=float, default=0.25)

    p = sub.add_parser("ablate", help="sweep one config parameter and tabulate results")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True,
                   choices=["weighting_fn", "alpha", "patch_size"])
    p.add_argument("--steps", type=int, default=None,
                   help="stage-2 steps per arm (default: config stage2_steps)")
    p.add_argument("--out", default=None, help="table file (default: stdout)")
    return parser


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    path = run_training(cfg, resume_from=args.resume)
    print(f"checkpoint written: {path}")


def _cmd_generate(args) -> None:
    state = TrainState.load(args.ckpt)
    with Image.open(args.image) as im:
        src = from_uint8(np.asarray(im.convert("RGB")))
    with Image.open(args.mask) as mm:
        if mm.mode != "L":
            raise InputError(f"{args.mask}: expected 8-bit gray PNG, got mode {mm.mode}")
        fg = (np.asarray(mm) > 127).astype(np.uint8)
    if fg.shape != src.shape[:2]:
        raise InputError(
            f"mask dims {fg.shape} differ from image dims {src.shape[:2]}")
    sample = make_sample("cli", src, fg, state.cfg.image_size)
    out = generate_image(state, sample, seed=args.seed)
    Image.fromarray(to_uint8(out), "RGB").save(args.out)
    print(f"image written: {args.out}")


def _cmd_evaluate(args) -> None:
    state = TrainState.load(args.ckpt)
    report = evaluate_run(state, args.data, out_dir=args.out + ".artifacts",
                          report_path=args.out)
    print(report.to_table(), end="")
    print(f"report written: {args.out}")


def _cmd_synth(args) -> None:
    manifest = synth_dataset(args.seed, args.n, args.size, args.size, args.out,
                             area_range=(args.area_min, args.area_max))
    print(f"{len(manifest)} samples written to {args.out}")


def _cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    table = run_ablation(cfg, cfg.data_dir, args.param, steps=args.steps)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
        print(f"table written: {args.out}")
    else:
        print(table, end="")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "generate": _cmd_generate,
        "evaluate": _cmd_evaluate,
        "synth-data": _cmd_synth,
        "ablate": _cmd_ablate,
    }
    try:
        handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputError, DimensionError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except CamogenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
