#!/usr/bin/env python3
"""
MH2F-Net command line.

Usage:
    python cli.py train  --data DIR [--eval DIR] [--config FILE] --out DIR [--model.num_mheb 4 ...]
    python cli.py derain --input PATH_OR_DIR --checkpoint FILE --out DIR
    python cli.py eval   --derained DIR --gt DIR [--input DIR] [--report FILE]
    python cli.py synth  --clean DIR --out DIR [--params FILE | --preset NAME | --density 0.02 ...]
    python cli.py ablate --data DIR --grid FILE|depth|fusion --out DIR [--config FILE]
    python cli.py verify [--corrupt-gradient]

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Environment Variables:
    LOG_LEVEL             Logging level (default: INFO)
    MH2F_DETERMINISTIC    Override train.deterministic (1/0)
    MH2F_NUM_THREADS      Pin torch intra-op threads
"""

import argparse
import json
import logging
import sys
import time
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config import (
    ConfigurationError,
    MH2FError,
    ModelConfig,
    RainParams,
    TrainConfig,
    build_train_config,
    canonical_json,
    config_as_dict,
    configure_logging,
    env_flag,
    field_overrides,
    load_config_file,
    parse_config,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


# ----- Argument helpers -----

def _parse_bool(text: str) -> bool:
    try:
        value = env_flag(text)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e)) from e
    if value is None:
        raise argparse.ArgumentTypeError("expected a boolean")
    return value


def _flag_kwargs(annotation: Any) -> Dict[str, Any]:
    """argparse type/choices for a pydantic field annotation."""
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if typing.get_origin(annotation) is typing.Union and len(args) == 1:
        annotation = args[0]
    if typing.get_origin(annotation) is typing.Literal:
        return {"type": str, "choices": list(typing.get_args(annotation))}
    if annotation is bool:
        return {"type": _parse_bool}
    if annotation in (int, float, str):
        return {"type": annotation}
    return {"type": str}


def add_override_flags(parser: argparse.ArgumentParser) -> None:
    """Dotted --train.* / --model.* flags generated from the config models."""
    group = parser.add_argument_group("config overrides (flags beat file beats defaults)")
    for model_cls, prefix in ((TrainConfig, "train"), (ModelConfig, "model")):
        for flag, dest, annotation in field_overrides(model_cls, prefix):
            group.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **_flag_kwargs(annotation))


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in vars(args).items() if key.startswith(("train.", "model."))}


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Load --config, apply overrides and echo the effective configuration."""
    sections = load_config_file(args.config)
    config = build_train_config(sections, collect_overrides(args))
    print(f"effective config: {canonical_json(config_as_dict(config))}")
    print(config.summary())
    return config


# ----- Subcommands -----

def cmd_train(args: argparse.Namespace) -> int:
    from checkpoint import load_checkpoint
    from datapipe import index_dataset
    from trainer import fit

    config = resolve_train_config(args)
    train_index = index_dataset(Path(args.data), args.scheme)
    eval_index = index_dataset(Path(args.eval), args.scheme) if args.eval else None
    resume = load_checkpoint(Path(args.resume)) if args.resume else None

    result = fit(train_index, eval_index, config, out_dir=Path(args.out), resume=resume)
    final = result.log.iterations[-1] if result.log.iterations else None
    if final is not None:
        print(f"finished: iterations={final.iteration} last_total={final.total:.6f}")
    if result.checkpoint.best_psnr is not None:
        print(f"best eval PSNR: {result.checkpoint.best_psnr:.3f} dB")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def cmd_derain(args: argparse.Namespace) -> int:
    from blocks import derain_padded
    from checkpoint import load_checkpoint, restore_model
    from datapipe import image_to_tensor, list_images, load_image, save_image, tensor_to_image

    model = restore_model(load_checkpoint(Path(args.checkpoint)))
    model.eval()

    source = Path(args.input)
    inputs = list_images(source) if source.is_dir() else [source]
    if not inputs:
        print(f"error: no images found in {source}", file=sys.stderr)
        return EXIT_FAILURE

    out_dir = Path(args.out)
    failures = 0
    for path in inputs:
        try:
            derained = derain_padded(model, image_to_tensor(load_image(path)))
            target = save_image(out_dir / f"{path.stem}.png", tensor_to_image(derained))
            logger.info(f"Derained {path} -> {target}")
        except (MH2FError, OSError, ValueError) as e:
            failures += 1
            print(f"error: {path}: {e}", file=sys.stderr)

    print(f"derained {len(inputs) - failures}/{len(inputs)} images into {out_dir}")
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from datapipe import image_to_tensor, list_images, load_image
    from losses import evaluate_pairs

    derained_dir, gt_dir = Path(args.derained), Path(args.gt)
    derained = {p.name: p for p in list_images(derained_dir)}
    truth = {p.name: p for p in list_images(gt_dir)}

    unmatched = sorted(set(derained) - set(truth))
    for name in unmatched:
        print(f"error: missing ground truth for {name} in {gt_dir}", file=sys.stderr)
    for name in sorted(set(truth) - set(derained)):
        print(f"warning: no derained image for ground truth {name}", file=sys.stderr)

    names = [p.name for p in list_images(derained_dir) if p.name in truth]
    if not names:
        print("error: no matching derained/ground-truth pairs", file=sys.stderr)
        return EXIT_FAILURE

    truths = {name: image_to_tensor(load_image(truth[name])) for name in names}
    pairs = [(image_to_tensor(load_image(derained[name])), truths[name]) for name in names]
    report = evaluate_pairs(pairs, names)
    print(report.to_text())

    report_path = Path(args.report) if args.report else derained_dir / "eval_report.csv"
    report.write_csv(report_path)
    print(f"report written to {report_path}")

    if args.input:
        rainy_dir = Path(args.input)
        baseline_pairs = []
        for name in names:
            rainy_path = rainy_dir / name
            if rainy_path.is_file():
                baseline_pairs.append((image_to_tensor(load_image(rainy_path)), truths[name]))
        if baseline_pairs:
            baseline = evaluate_pairs(baseline_pairs)
            print(f"rainy input baseline: PSNR={baseline.mean_psnr:.4f} dB SSIM={baseline.mean_ssim:.4f}")

    return EXIT_FAILURE if unmatched else EXIT_OK


def _rain_params_from_args(args: argparse.Namespace) -> List[RainParams]:
    from rainsim import RAIN_PRESETS

    if args.preset:
        return list(RAIN_PRESETS[args.preset])

    if args.params:
        path = Path(args.params)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read rain parameter file {path}: {e}") from e
        if isinstance(raw, dict):
            raw = raw.get("rain", raw)
        items = raw if isinstance(raw, list) else [raw]
        return [parse_config(RainParams, item) for item in items]

    values = {
        key: value
        for key, value in {
            "angle_deg": args.angle,
            "length_px": args.length,
            "density": args.density,
            "intensity": args.intensity,
            "intensity_jitter": args.jitter,
            "seed": args.seed,
        }.items()
        if value is not None
    }
    file_values = load_config_file(args.config)["rain"]
    return [parse_config(RainParams, {**file_values, **values})]


def cmd_synth(args: argparse.Namespace) -> int:
    from rainsim import generate_dataset

    grid = _rain_params_from_args(args)
    for params in grid:
        print(f"rain params: {canonical_json(config_as_dict(params))}")
    rows = generate_dataset(Path(args.clean), grid, Path(args.out), workers=args.workers)
    print(f"wrote {len(rows)} pairs to {args.out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from datapipe import index_dataset
    from trainer import load_grid, run_ablation

    variants = load_grid(args.grid)
    config = resolve_train_config(args)
    train_index = index_dataset(Path(args.data), args.scheme)
    eval_index = index_dataset(Path(args.eval), args.scheme) if args.eval else None

    table = run_ablation(config, variants, train_index, eval_index, out_dir=Path(args.out))
    print(table.to_text())
    print(f"table written to {Path(args.out) / 'ablation.csv'}")
    return EXIT_FAILURE if any(row.error for row in table.rows) else EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from gradcheck import run_verification

    started = time.perf_counter()
    passed, lines = run_verification(corrupt=args.corrupt_gradient, blocks=args.blocks)
    for line in lines:
        print(line)
    print(f"{'ALL PASS' if passed else 'FAILED'} in {time.perf_counter() - started:.1f}s")
    return EXIT_OK if passed else EXIT_FAILURE


# ----- Parser -----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mh2f", description="MH2F-Net single-image deraining toolkit")
    parser.add_argument("--log-level", default=None, help="Logging level (default: LOG_LEVEL env or INFO)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Train a model on paired rainy/clean images")
    train.add_argument("--data", required=True, help="Training pairs directory")
    train.add_argument("--eval", default=None, help="Evaluation pairs directory")
    train.add_argument("--config", default=None, help="JSON config file")
    train.add_argument("--out", required=True, help="Output directory for checkpoints and logs")
    train.add_argument("--scheme", choices=["rain_norain", "manifest"], default="rain_norain")
    train.add_argument("--resume", default=None, help="Checkpoint to resume from")
    add_override_flags(train)
    train.set_defaults(handler=cmd_train)

    derain = subparsers.add_parser("derain", help="Derain an image or a directory of images")
    derain.add_argument("--input", required=True, help="Image file or directory")
    derain.add_argument("--checkpoint", required=True, help="Checkpoint file")
    derain.add_argument("--out", required=True, help="Output directory")
    derain.set_defaults(handler=cmd_derain)

    evaluate = subparsers.add_parser("eval", help="PSNR/SSIM of derained images against ground truth")
    evaluate.add_argument("--derained", required=True, help="Directory of derained images")
    evaluate.add_argument("--gt", required=True, help="Directory of ground-truth images (same filenames)")
    evaluate.add_argument("--input", default=None, help="Directory of rainy inputs for a baseline score")
    evaluate.add_argument("--report", default=None, help="CSV report path (default: DERAINED/eval_report.csv)")
    evaluate.set_defaults(handler=cmd_eval)

    synth = subparsers.add_parser("synth", help="Generate a synthetic rainy dataset")
    synth.add_argument("--clean", required=True, help="Directory of clean images")
    synth.add_argument("--out", required=True, help="Output directory")
    source = synth.add_mutually_exclusive_group()
    source.add_argument("--params", default=None, help="JSON file with one or more rain parameter sets")
    source.add_argument("--preset", choices=["light", "heavy"], default=None)
    synth.add_argument("--config", default=None, help="JSON config file ('rain' section)")
    synth.add_argument("--angle", type=float, default=None)
    synth.add_argument("--length", type=int, default=None)
    synth.add_argument("--density", type=float, default=None)
    synth.add_argument("--intensity", type=float, default=None)
    synth.add_argument("--jitter", type=float, default=None)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--workers", type=int, default=1)
    synth.set_defaults(handler=cmd_synth)

    ablate = subparsers.add_parser("ablate", help="Train and compare architecture variants")
    ablate.add_argument("--data", required=True, help="Training pairs directory")
    ablate.add_argument("--eval", default=None, help="Evaluation pairs directory")
    ablate.add_argument("--grid", required=True, help="Grid JSON file, or 'depth' / 'fusion'")
    ablate.add_argument("--out", required=True, help="Output directory")
    ablate.add_argument("--config", default=None, help="JSON config file")
    ablate.add_argument("--scheme", choices=["rain_norain", "manifest"], default="rain_norain")
    add_override_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    verify = subparsers.add_parser("verify", help="Finite-difference gradient checks and SSIM oracle")
    verify.add_argument("--corrupt-gradient", action="store_true", help="Deliberately corrupt one gradient")
    verify.add_argument("--blocks", nargs="*", default=None, help="Subset of blocks to check")
    verify.set_defaults(handler=cmd_verify)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except ConfigurationError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MH2FError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
