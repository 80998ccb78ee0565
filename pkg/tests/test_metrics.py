#!/usr/bin/env python3
"""
Tests for segmentation metrics and reports.
"""

import itertools

import numpy as np
import pandas as pd
import pytest

from src.backend.metrics import (SegReport, ShapeResult, accuracy, aggregate, category_report_path,
                                 shape_miou, sweep_frame)
from src.backend.validation import ShapeError, ValidationError


def confusion_miou(pred, gt, c):
    """Mean IoU from a c-by-c confusion matrix."""
    m = np.zeros((c, c), dtype=np.int64)
    np.add.at(m, (np.asarray(gt), np.asarray(pred)), 1)
    ious = []
    for k in range(c):
        union = m[k, :].sum() + m[:, k].sum() - m[k, k]
        ious.append(1.0 if union == 0 else m[k, k] / union)
    return float(np.mean(ious))


class TestShapeMiou:
    """Test suite for shape_miou and accuracy."""

    def test_hand_case(self):
        assert shape_miou([0, 1, 1, 1], [0, 0, 1, 1], [0, 1]) == pytest.approx(7 / 12, abs=1e-12)

    def test_accuracy_hand_case(self):
        assert accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 0.75

    def test_perfect(self):
        assert shape_miou([3, 4, 4], [3, 4, 4], [3, 4]) == 1.0

    def test_absent_part_counts_as_one(self):
        # Part 2 appears in neither: (1 + 1 + 1) / 3
        assert shape_miou([0, 1], [0, 1], [0, 1, 2]) == 1.0

    def test_predicted_foreign_part_only_hurts_union(self):
        assert shape_miou([0, 9], [0, 1], [0, 1]) == pytest.approx(0.5)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            shape_miou([0, 1], [0, 1, 1], [0, 1])
        with pytest.raises(ShapeError):
            accuracy([0], [0, 1])

    def test_no_parts(self):
        with pytest.raises(ValidationError):
            shape_miou([0], [0], [])

    @pytest.mark.parametrize("c,max_n", [(1, 8), (2, 8), (3, 5)])
    def test_matches_confusion_oracle_exhaustively(self, c, max_n):
        for n in range(1, max_n + 1):
            for gt in itertools.product(range(c), repeat=n):
                for pred in itertools.product(range(c), repeat=n):
                    assert shape_miou(pred, gt, range(c)) == pytest.approx(
                        confusion_miou(pred, gt, c), abs=1e-12)

    def test_matches_confusion_oracle_sampled(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            gt, pred = rng.integers(0, 3, size=8), rng.integers(0, 3, size=8)
            assert shape_miou(pred, gt, range(3)) == pytest.approx(confusion_miou(pred, gt, 3), abs=1e-12)

    def test_relabel_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            gt, pred = rng.integers(0, 4, size=10), rng.integers(0, 4, size=10)
            mapping = rng.permutation([11, 23, 5, 40])
            assert shape_miou(mapping[pred], mapping[gt], mapping) == pytest.approx(
                shape_miou(pred, gt, range(4)), abs=1e-15)


class TestAggregate:
    """Test suite for aggregate and report output."""

    @pytest.fixture
    def report(self):
        return aggregate([
            ShapeResult("mug", "mug_000", 0.5, 0.9),
            ShapeResult("mug", "mug_001", 0.7, 0.7),
            ShapeResult("lamp", "lamp_000", 0.8, 1.0),
        ], label="unit")

    def test_category_means(self, report):
        assert report.category_miou == {"mug": pytest.approx(0.6), "lamp": pytest.approx(0.8)}
        assert report.mean_miou == pytest.approx(0.7)
        assert report.mean_accuracy == pytest.approx(0.9)

    def test_mean_row_over_eight_categories(self):
        values = [0.41, 0.52, 0.63, 0.74, 0.35, 0.86, 0.27, 0.98]
        report = aggregate([ShapeResult(f"cat{i}", f"s{i}", v, v) for i, v in enumerate(values)])
        frame = report.category_frame()
        assert len(frame) == 9
        mean_row = frame[frame["category"] == "Mean"].iloc[0]
        assert mean_row["miou"] == pytest.approx(np.mean(values))

    def test_empty_input(self):
        with pytest.raises(ValidationError):
            aggregate([])

    def test_category_override(self):
        report = aggregate([ShapeResult("?", "a", 1.0, 1.0), ShapeResult("?", "b", 0.0, 0.0)],
                           category_of={"a": "x", "b": "y"})
        assert set(report.category_miou) == {"x", "y"}

    def test_summary(self, report):
        report.settings = {"mode": "D", "k_shot": 1}
        text = report.summary()
        assert "unit" in text
        assert "mode=D, k_shot=1" in text
        assert "Mean      mIoU  70.00%" in text

    def test_save_csv(self, report, tmp_path):
        path = tmp_path / "report.csv"
        report.save_csv(str(path))
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["category", "shape", "miou", "accuracy"]
        assert len(frame) == 3

    def test_save_category_csv(self, report, tmp_path):
        path = category_report_path(str(tmp_path / "report.csv"))
        assert path.endswith("report_categories.csv")
        report.save_category_csv(path)
        frame = pd.read_csv(path)
        assert list(frame["category"])[-1] == "Mean"
        assert len(frame) == len(report.category_miou) + 1
        assert frame["miou"].iloc[-1] == pytest.approx(report.mean_miou, abs=1e-6)

    def test_sweep_frame(self, report):
        other = SegReport(report.shapes, report.category_miou, report.category_accuracy, 0.5, 0.5,
                          label="k=5", settings={"k_shot": 5})
        report.settings = {"k_shot": 1}
        frame = sweep_frame([report, other])
        assert list(frame["setting"]) == ["unit", "k=5"]
        assert list(frame["k_shot"]) == [1, 5]
        assert "miou_lamp" in frame.columns
