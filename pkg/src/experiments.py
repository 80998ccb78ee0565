#!/usr/bin/env python3
"""
Direction-of-effect experiments on the synthetic corpus.

    ablation  weight settings A to D, mean novel-category mIoU over seeds
    shots     settings A and D at several support sizes
    overfit   single-shape adaptation per category on the default layer plan

Run with ``python -m src.experiments <experiment> [--config path] [--data dir]``.
"""

import argparse
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence

import pandas as pd

# Add parent directory to system path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.backend.config import LayerPlan, RunConfig, build_config, load_config
from src.backend.data import DatasetManifest, build_episode, load_manifest
from src.backend.engine import episode_rng, initial_state, inner_adapt, meta_test, meta_train
from src.backend.synthetic import write_corpus
from src.backend.validation import DataError, NumericError, ValidationError, handle_error

logger = logging.getLogger(__name__)

CORPUS_CATEGORIES = ("barbell", "table", "mug", "lamp")
NOVEL_CATEGORY = "lamp"
OVERFIT_STREAM = 4

# Desk-scale defaults: 200 shared pretraining episodes, then 200 meta-training
# episodes at the meta-test support sizes on a reduced layer plan
DESK_CONFIG = {
    "n_way": 2,
    "k_shot": 1,
    "train_shots": [1, 5, 10],
    "test_k_shot": 10,
    "n_query": 2,
    "points_per_shape": 256,
    "inner_steps": 20,
    "episodes_per_epoch": 20,
    "meta_epochs": 10,
    "pretrain_episodes": 200,
    "phase1_fraction": 0.0,
    "overlay_scale": 0.1,
    "plan": {"g1": [16, 32], "g2": [32, 16], "max_parts": 6, "score_dims": [16],
             "embed_dim": 8, "vae_dims": [16]},
}


@contextmanager
def corpus(data_dir: Optional[str], seed: int, shapes_per_category: int = 16,
           n_points: int = 512) -> Iterator[DatasetManifest]:
    """Use an existing manifest directory or write a temporary corpus."""
    if data_dir:
        yield load_manifest(os.path.join(data_dir, "manifest.json"))
        return
    with tempfile.TemporaryDirectory(prefix="meta3dseg-") as tmp:
        path = write_corpus(tmp, CORPUS_CATEGORIES, shapes_per_category, n_points, seed,
                            novel=[NOVEL_CATEGORY])
        yield load_manifest(path)


def run_modes(manifest: DatasetManifest, config: RunConfig, modes: Sequence[str],
              seeds: Sequence[int], shots: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """
    Train and meta-test every (mode, seed) pair.

    Returns:
        One row per (mode, seed, k_shot) with the mean novel mIoU and ACC
    """
    rows = []
    for mode in modes:
        for seed in seeds:
            run = config.model_copy(update={"mode": mode, "seed": seed})
            result = meta_train(manifest, run)
            for k in shots or [run.meta_test_shots]:
                report = meta_test(manifest, result.meta, result.bundle, run, k_shot=k)
                rows.append({"mode": mode, "seed": seed, "k_shot": k,
                             "miou": report.mean_miou, "accuracy": report.mean_accuracy})
                logger.info(f"mode {mode} seed {seed} k={k}: mIoU {report.mean_miou:.4f}")
    return pd.DataFrame(rows)


def ablation(manifest: DatasetManifest, config: RunConfig, seeds: Sequence[int]) -> pd.DataFrame:
    """Mean mIoU per weight setting, in percent."""
    frame = run_modes(manifest, config, ["A", "B", "C", "D"], seeds)
    return frame.groupby("mode")[["miou", "accuracy"]].mean().mul(100)


def shot_sweep(manifest: DatasetManifest, config: RunConfig, seeds: Sequence[int],
               shots: Sequence[int] = (1, 5, 10)) -> pd.DataFrame:
    """Mean mIoU in percent with one column per setting and one row per support size."""
    frame = run_modes(manifest, config, ["A", "D"], seeds, shots)
    return frame.pivot_table(index="k_shot", columns="mode", values="miou", aggfunc="mean").mul(100)


def overfit(manifest: DatasetManifest, config: RunConfig, steps: int = 200, lr: float = 1e-3,
            plan: Optional[LayerPlan] = None) -> Dict[str, List[float]]:
    """
    Support loss curve of a fresh network adapting to one shape of each
    category. ``plan`` replaces the config's layer plan when given.
    """
    if plan is not None:
        config = config.model_copy(update={"plan": plan})
    bundle, _ = initial_state(config)
    curves = {}
    for index, category in enumerate(manifest.categories):
        rng = episode_rng(config.seed, OVERFIT_STREAM, index)
        episode = build_episode(manifest, 1, 1, rng, categories=[category], n_query=0,
                                n_points=config.points_per_shape)
        curves[category] = inner_adapt(episode, bundle, steps, lr).losses
        logger.info(f"overfit {category}: {curves[category][0]:.4f} -> {curves[category][-1]:.4f}")
    return curves


def print_checks(title: str, checks: Dict[str, bool]) -> bool:
    """Print a pass/fail line per check and return whether all passed."""
    print("\n" + "=" * 50)
    print(title)
    print("=" * 50)
    for name, passed in checks.items():
        print(f"  {'PASS' if passed else 'FAIL'}  {name}")
    return all(checks.values())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Run Meta-3DSeg direction-of-effect experiments")
    parser.add_argument("experiment", choices=["ablation", "shots", "overfit"])
    parser.add_argument("--config", help="RunConfig JSON (default: desk-scale settings)")
    parser.add_argument("--data", help="Directory holding manifest.json (default: fresh synthetic corpus)")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose output")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    try:
        config = load_config(args.config) if args.config else build_config(DESK_CONFIG)
        seeds = list(range(config.seed, config.seed + args.seeds))
        with corpus(args.data, config.seed) as manifest:
            if args.experiment == "ablation":
                table = ablation(manifest, config, seeds)
                print(table.to_string(float_format=lambda v: f"{v:6.2f}"))
                m = table["miou"]
                passed = print_checks("WEIGHT-SETTING ABLATION", {
                    "D >= C": m["D"] >= m["C"],
                    "C >= B": m["C"] >= m["B"],
                    "D - A >= 5 points": m["D"] - m["A"] >= 5.0,
                })
            elif args.experiment == "shots":
                table = shot_sweep(manifest, config, seeds)
                print(table.to_string(float_format=lambda v: f"{v:6.2f}"))
                passed = print_checks("SHOT SWEEP", {
                    f"k={k}: D - A >= 3 points": table.loc[k, "D"] - table.loc[k, "A"] >= 3.0
                    for k in table.index
                })
            else:
                curves = overfit(manifest, config, plan=None if args.config else LayerPlan())
                for category, losses in curves.items():
                    print(f"{category:<9} {losses[0]:.4f} -> {losses[-1]:.4f}")
                passed = print_checks("SINGLE-SHAPE OVERFIT", {
                    f"{category}: final support loss < 0.1": losses[-1] < 0.1
                    for category, losses in curves.items()
                })
    except (ValidationError, DataError, NumericError, OSError) as e:
        response, code = handle_error(e)
        print(f"error ({response['type']}): {response['error']}", file=sys.stderr)
        return code
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
