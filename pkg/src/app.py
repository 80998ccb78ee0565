#!/usr/bin/env python3
"""
Command-line entry point for Meta-3DSeg.

Subcommands:
    gen-data    write a synthetic part-segmentation corpus and its manifest
    meta-train  episodic training; writes a checkpoint and the training log
    eval        meta-test a checkpoint on the novel categories
    export-seg  write "x y z predicted_label" lines for one shape

Run with ``python -m src.app <subcommand> ...``.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from src.backend.checkpoint import Checkpoint, check_plan, load_checkpoint, save_checkpoint
from src.backend.config import RunConfig, load_config, save_config
from src.backend.data import (Episode, PointCloud, build_episode, load_manifest, load_shape,
                              normalize)
from src.backend.engine import adapt_and_predict, episode_rng, meta_test, meta_train
from src.backend.metrics import category_report_path, sweep_frame
from src.backend.psl import as_tensors, effective_params, predict
from src.backend.reports.templates import get_template
from src.backend.synthetic import DEFAULT_POINTS, GENERATORS, write_corpus
from src.backend.validation import (EXIT_OK, DataError, NumericError, ValidationError,
                                    handle_error)
from src.version import CHECKPOINT_FORMAT_VERSION, get_version

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV_VAR = "META3DSEG_LOG_LEVEL"
CHECKPOINT_NAME = "checkpoint.m3ds"
TRAIN_LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.json"
EXPORT_STREAM = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors map to the usage exit code."""

    def error(self, message):
        raise ValidationError(message, "usage")


def _str_list(value: str) -> List[str]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _int_list(value: str) -> List[int]:
    try:
        items = [int(v) for v in _str_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")
    if any(v < 1 for v in items):
        raise argparse.ArgumentTypeError(f"values must be positive, got {value!r}")
    return items


def _resolve_manifest(args: argparse.Namespace, config: RunConfig) -> str:
    path = getattr(args, "manifest", None) or config.manifest
    if not path:
        raise ValidationError("No manifest given: pass --manifest or set 'manifest' in the config",
                              "manifest")
    return path


def cmd_gen_data(args: argparse.Namespace) -> int:
    path = write_corpus(args.out, args.categories, args.shapes_per_category, args.points, args.seed,
                        novel=args.novel)
    print(f"Wrote {len(args.categories) * args.shapes_per_category} shapes and {path}")
    return EXIT_OK


def cmd_meta_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    manifest = load_manifest(_resolve_manifest(args, config))
    result = meta_train(manifest, config)

    os.makedirs(args.out, exist_ok=True)
    checkpoint_path = os.path.join(args.out, CHECKPOINT_NAME)
    log_path = os.path.join(args.out, TRAIN_LOG_NAME)
    save_checkpoint(Checkpoint(config.mode, config.plan, result.bundle, result.meta), checkpoint_path)
    result.log.save_csv(log_path)
    save_config(config, os.path.join(args.out, CONFIG_NAME))

    rows = result.log.rows
    print(get_template("train_done", {
        "mode": config.mode,
        "episodes": len(rows),
        "first_loss": rows[0].query_loss,
        "last_loss": rows[-1].query_loss,
        "first_miou": rows[0].query_miou,
        "last_miou": rows[-1].query_miou,
        "checkpoint": checkpoint_path,
        "log": log_path,
    }))
    return EXIT_OK


def _checkpoint_config(checkpoint: Checkpoint, config: RunConfig) -> RunConfig:
    check_plan(checkpoint, config.plan)
    if checkpoint.mode != config.mode:
        logger.warning(f"Config names weight setting {config.mode}; "
                       f"using the checkpoint's {checkpoint.mode}")
        config = config.model_copy(update={"mode": checkpoint.mode})
    return config


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(checkpoint, load_config(args.config))
    manifest = load_manifest(args.manifest)

    if not args.shots and not args.points:
        report = meta_test(manifest, checkpoint.meta, checkpoint.bundle, config)
        print(report.summary())
        if args.out:
            report.save_csv(args.out)
            report.save_category_csv(category_report_path(args.out))
        return EXIT_OK

    shots = args.shots or [config.meta_test_shots]
    points = args.points or [config.points_per_shape]
    reports = []
    for k in shots:
        for n in points:
            label = f"k={k},n={n}"
            reports.append(meta_test(manifest, checkpoint.meta, checkpoint.bundle, config,
                                     k_shot=k, n_points=n, label=label))
    axis = " and ".join(name for name, used in (("shots", args.shots), ("points", args.points)) if used)
    print(get_template("sweep_header", {"axis": axis, "count": len(reports)}))
    for report in reports:
        print(get_template("sweep_row", {"setting": report.label,
                                         "mean_miou": 100 * report.mean_miou,
                                         "mean_accuracy": 100 * report.mean_accuracy}))
    if args.out:
        sweep_frame(reports).to_csv(args.out, index=False, float_format="%.6f", lineterminator="\n")
    return EXIT_OK


def _infer_category(shape_path: str, manifest) -> str:
    target = os.path.abspath(shape_path)
    for entry in manifest.entries:
        if os.path.abspath(manifest.resolve(entry)) == target:
            return entry.category
    raise ValidationError(f"Cannot tell the category of {shape_path}; pass --category", "category")


def _write_export(cloud: PointCloud, labels: np.ndarray, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for (x, y, z), label in zip(cloud.points, labels):
            f.write(f"{x:.12g} {y:.12g} {z:.12g} {int(label)}\n")


def cmd_export_seg(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    plan = checkpoint.plan
    if args.manifest and args.config:
        config = _checkpoint_config(checkpoint, load_config(args.config))
        manifest = load_manifest(args.manifest)
        category = args.category or _infer_category(args.shape, manifest)
        if category not in manifest.schemas:
            raise DataError(f"Category '{category}' is not declared in manifest '{manifest.name}'")
        raw = load_shape(args.shape, manifest.schemas[category], category)
        rng = episode_rng(config.seed, EXPORT_STREAM)
        episode = build_episode(manifest, 1, config.meta_test_shots, rng, categories=[category],
                                n_query=0, n_points=config.points_per_shape)
        theta_t, theta_m, _ = adapt_and_predict(episode, checkpoint.bundle, checkpoint.meta, config, rng)
        weights = as_tensors(effective_params(theta_t, theta_m))
    elif args.manifest or args.config:
        raise ValidationError("--manifest and --config must be given together", "manifest")
    else:
        raw = load_shape(args.shape)
        # No category to adapt to: labels are the plan's raw output columns
        episode = Episode([], [], {i: i for i in range(plan.max_parts)}, [])
        weights = as_tensors(checkpoint.bundle.effective())

    out = predict(normalize(raw).points, weights, plan, episode.num_classes)
    _write_export(raw, episode.global_labels(out.predictions()), args.out)
    print(f"Wrote {raw.num_points} labelled points to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meta3dseg", description="Few-shot 3D part segmentation with a meta-learned weight overlay")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {get_version()} (checkpoint format {CHECKPOINT_FORMAT_VERSION})")
    parser.add_argument("--log-level", default=os.getenv(LOG_LEVEL_ENV_VAR, "WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper,
                        help=f"Logging level (default from {LOG_LEVEL_ENV_VAR}, else WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Write a synthetic corpus")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--categories", type=_str_list, default=sorted(GENERATORS),
                     help="Comma-separated synthetic categories")
    gen.add_argument("--shapes-per-category", type=int, default=20)
    gen.add_argument("--points", type=int, default=DEFAULT_POINTS)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--novel", type=_str_list, default=None,
                     help="Held-out categories (default: the last one listed)")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("meta-train", help="Episodic training on the base categories")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True, help="Output directory")
    train.add_argument("--manifest", help="Overrides the config's manifest")
    train.set_defaults(func=cmd_meta_train)

    ev = sub.add_parser("eval", help="Meta-test on the novel categories")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--shots", type=_int_list, help="Comma-separated support sizes to sweep")
    ev.add_argument("--points", type=_int_list, help="Comma-separated points-per-shape to sweep")
    ev.add_argument("--out", help="CSV path for the per-shape report or the sweep table")
    ev.set_defaults(func=cmd_eval)

    export = sub.add_parser("export-seg", help="Predict part labels for one shape file")
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--shape", required=True)
    export.add_argument("--out", required=True)
    export.add_argument("--manifest", help="Adapt to the shape's category first (needs --config)")
    export.add_argument("--config")
    export.add_argument("--category", help="Category of the shape (default: looked up in the manifest)")
    export.set_defaults(func=cmd_export_seg)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (ValidationError, DataError, NumericError, OSError) as e:
        response, code = handle_error(e)
        print(f"error ({response['type']}): {response['error']}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
