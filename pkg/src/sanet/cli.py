"""Command-line entry point: train, eval, infer, ablate, gradcheck, flops, synth.

Exit codes: 0 success, 1 invalid input or configuration, 2 a check failed,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, dump_config, load_config
from .imageio import LoadError, atomic_write, colorize, encode_pgm, encode_ppm, load_dataset, read_ppm
from .synth import generate, to_arrays, write_dataset
from .tensor import SeededRng

EXIT_OK, EXIT_INVALID, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sanet")


class CheckFailure(Exception):
    pass


def _split(cfg: RunConfig, directory: str, count: int, seed_key: int):
    """Images/labels from ``directory``, or a synthetic split when it is unset."""
    if directory:
        samples = load_dataset(directory, cfg.model.num_classes, cfg.data.ignore_index)
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise LoadError(f"{directory}: images have differing extents {sorted(shapes)}")
        return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])
    if count <= 0:
        return None
    size = cfg.data.image_size
    return to_arrays(generate(count, (size, size), cfg.model.num_classes, SeededRng(cfg.train.seed, seed_key)))


def train_split(cfg: RunConfig):
    return _split(cfg, cfg.data.train_dir, cfg.data.train_count, 100)


def val_split(cfg: RunConfig):
    return _split(cfg, cfg.data.val_dir, cfg.data.val_count, 101)


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train

    out = Path(args.out or "runs/train")
    x, y = train_split(cfg)
    val = val_split(cfg)
    resume = ckpt_io.load(args.checkpoint) if args.checkpoint else None
    atomic_write(out / "config.txt", dump_config(cfg))
    result = train(cfg, x, y, *(val or (None, None)), out_dir=out, resume=resume)
    if result.final is not None:
        r = result.final.report
        print(f"final: pixel_accuracy={r.pixel_accuracy:.4f} mean_iou={r.mean_iou:.4f} "
              f"best_step={result.best_step}")
    print(f"wrote {out}")
    return EXIT_OK


def _load_model(args, cfg: RunConfig):
    from .train import model_from_checkpoint

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return model_from_checkpoint(ckpt_io.load(args.checkpoint), cfg)[0]


def cmd_eval(args, cfg: RunConfig) -> int:
    from .train import evaluate

    model = _load_model(args, cfg)
    split = val_split(cfg) or train_split(cfg)
    x, y = split
    result = evaluate(model, x, y, cfg.model.num_classes, cfg.data.ignore_index, scales=cfg.infer.scales)
    csv = result.report.to_csv()
    if args.out:
        atomic_write(Path(args.out) / "eval_metrics.csv", csv)
    print(csv, end="")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    from .training import multi_scale_infer

    if not args.image:
        raise ConfigError("--image is required")
    model = _load_model(args, cfg)
    rgb = read_ppm(args.image)
    image = rgb.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    probs = multi_scale_infer(model, image, cfg.infer.scales)
    labels = probs[0].argmax(axis=0).astype(np.uint8)
    out = Path(args.out or ".")
    stem = Path(args.image).stem
    atomic_write(out / f"{stem}_labels.pgm", encode_pgm(labels))
    atomic_write(out / f"{stem}_color.ppm", encode_ppm(colorize(labels)))
    print(f"wrote {out / (stem + '_labels.pgm')} and {out / (stem + '_color.ppm')}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .ablation import run_ablation

    def progress(r):
        log.info("%s seed %d final mIoU %.4f", r.variant, r.seed, r.final_miou)

    result = run_ablation(cfg, progress=progress)
    out = Path(args.out or "runs/ablate")
    atomic_write(out / "ablation.csv", result.to_csv())
    variants = list(dict.fromkeys(r.variant for r in result.runs))
    print(f"{'variant':<14} {'median_miou':>12} {'median_epochs':>14}")
    for v in variants:
        print(f"{v:<14} {result.median_miou(v):>12.4f} {result.median_epochs(v):>14}")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from contextlib import nullcontext

    from .verification import corrupted_backward, gradcheck_suite

    ctx = corrupted_backward(args.corrupt_op) if args.corrupt_op else nullcontext()
    with ctx:
        reports = gradcheck_suite()
    print(f"{'check':<32} {'elems':>6} {'worst_rel':>12}  status")
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise CheckFailure(f"gradient check failed: {', '.join(failed)}")
    print(f"all {len(reports)} gradient checks passed")
    return EXIT_OK


def cmd_flops(args, cfg: RunConfig) -> int:
    from .flops import flops_count

    size = cfg.data.image_size
    report = flops_count(cfg.model, (3, size, size))
    print(report.table())
    if args.out:
        atomic_write(Path(args.out) / "flops.csv", report.to_csv())
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    size = cfg.data.image_size
    out = write_dataset(args.out or "data/synth", cfg.data.train_count, (size, size), cfg.model.num_classes,
                        cfg.train.seed)
    print(f"wrote {cfg.data.train_count} samples to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "flops": cmd_flops, "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint to load (train: resume from it)")
        if name == "infer":
            p.add_argument("--image", help="input PPM image")
        if name == "gradcheck":
            p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.train.seed = args.seed
        return COMMANDS[args.command](args, cfg)
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (LoadError, ckpt_io.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # ConfigError, shape and class-count mismatches
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:  # non-finite loss
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
