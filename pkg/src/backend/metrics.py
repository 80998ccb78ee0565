#!/usr/bin/env python3
"""
Segmentation metrics and report aggregation.

A shape's mIoU averages the IoU of every part type its category declares;
a part absent from both prediction and ground truth scores 1. A category's
mIoU is the mean over its shapes, and the overall figure is the mean over
categories.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .reports.templates import get_template
from .validation import ShapeError, ValidationError

logger = logging.getLogger(__name__)


def _check_lengths(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ShapeError(f"Prediction has shape {pred.shape}, ground truth {gt.shape}", "pred")


def shape_miou(pred: Sequence[int], gt: Sequence[int], parts_of_category: Iterable[int]) -> float:
    """Mean IoU over the category's part types; empty-vs-empty counts as 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_lengths(pred, gt)
    parts = sorted(set(int(p) for p in parts_of_category))
    if not parts:
        raise ValidationError("A category needs at least one part to score", "parts")
    ious = []
    for part in parts:
        in_pred, in_gt = pred == part, gt == part
        union = np.count_nonzero(in_pred | in_gt)
        ious.append(1.0 if union == 0 else np.count_nonzero(in_pred & in_gt) / union)
    return float(np.mean(ious))


def accuracy(pred: Sequence[int], gt: Sequence[int]) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_lengths(pred, gt)
    if pred.size == 0:
        raise ShapeError("Cannot score an empty shape", "pred")
    return float(np.count_nonzero(pred == gt) / pred.size)


@dataclass
class ShapeResult:
    category: str
    name: str
    miou: float
    accuracy: float


@dataclass
class SegReport:
    """Per-shape results with category and overall means."""
    shapes: List[ShapeResult]
    category_miou: Dict[str, float]
    category_accuracy: Dict[str, float]
    mean_miou: float
    mean_accuracy: float
    label: str = ""
    settings: Dict[str, object] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"category": s.category, "shape": s.name, "miou": s.miou, "accuracy": s.accuracy}
             for s in self.shapes],
            columns=["category", "shape", "miou", "accuracy"],
        )

    def category_frame(self) -> pd.DataFrame:
        rows = [{"category": c, "miou": self.category_miou[c], "accuracy": self.category_accuracy[c]}
                for c in self.category_miou]
        rows.append({"category": "Mean", "miou": self.mean_miou, "accuracy": self.mean_accuracy})
        return pd.DataFrame(rows, columns=["category", "miou", "accuracy"])

    def save_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    def save_category_csv(self, path: str) -> None:
        """Per-category rows followed by the Mean row."""
        self.category_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    def summary(self) -> str:
        rows = "\n".join(
            get_template("category_row", {"category": c, "miou": 100 * self.category_miou[c],
                                          "accuracy": 100 * self.category_accuracy[c],
                                          "shapes": sum(1 for s in self.shapes if s.category == c)})
            for c in self.category_miou
        )
        return get_template("summary", {
            "label": self.label or "meta-test",
            "settings": ", ".join(f"{k}={v}" for k, v in self.settings.items()) or "default",
            "category_rows": rows,
            "mean_miou": 100 * self.mean_miou,
            "mean_accuracy": 100 * self.mean_accuracy,
        })


def category_report_path(path: str) -> str:
    """Sibling of a per-shape report path: report.csv becomes report_categories.csv."""
    root, ext = os.path.splitext(path)
    return f"{root}_categories{ext or '.csv'}"


def aggregate(results: Sequence[ShapeResult], category_of: Optional[Mapping[str, str]] = None,
              label: str = "") -> SegReport:
    """
    Category means of per-shape results and the mean over categories.

    Args:
        results: Per-shape results
        category_of: Optional shape-name to category override
        label: Report label carried into summaries

    Raises:
        ValidationError: If there are no results
    """
    if not results:
        raise ValidationError("Cannot aggregate an empty set of shape results", "results")
    if category_of:
        results = [ShapeResult(category_of.get(r.name, r.category), r.name, r.miou, r.accuracy)
                   for r in results]
    by_category: Dict[str, List[ShapeResult]] = {}
    for r in results:
        by_category.setdefault(r.category, []).append(r)
    category_miou = {c: float(np.mean([r.miou for r in rs])) for c, rs in by_category.items()}
    category_accuracy = {c: float(np.mean([r.accuracy for r in rs])) for c, rs in by_category.items()}
    report = SegReport(
        shapes=list(results),
        category_miou=category_miou,
        category_accuracy=category_accuracy,
        mean_miou=float(np.mean(list(category_miou.values()))),
        mean_accuracy=float(np.mean(list(category_accuracy.values()))),
        label=label,
    )
    logger.info(f"Aggregated {len(results)} shapes over {len(by_category)} categories: "
                f"mIoU {report.mean_miou:.4f}")
    return report


def sweep_frame(reports: Sequence[SegReport]) -> pd.DataFrame:
    """One row per report: its settings, category mIoUs and the means."""
    rows = []
    for report in reports:
        row: Dict[str, object] = {"setting": report.label, **report.settings}
        for category, value in report.category_miou.items():
            row[f"miou_{category}"] = value
        row["mean_miou"] = report.mean_miou
        row["mean_accuracy"] = report.mean_accuracy
        rows.append(row)
    return pd.DataFrame(rows)
