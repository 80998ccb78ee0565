#!/usr/bin/env python3
"""
Tests for the command-line surface.
"""

import filecmp
import json
import os

import numpy as np
import pandas as pd
import pytest

from src.app import CHECKPOINT_NAME, CONFIG_NAME, TRAIN_LOG_NAME, main
from src.backend.checkpoint import Checkpoint, save_checkpoint
from src.backend.config import LayerPlan
from src.backend.psl import ParamBundle, layer_shapes
from src.backend.validation import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE
from src.version import CHECKPOINT_FORMAT_VERSION, get_version, get_version_info

TINY_CONFIG = {
    "n_way": 2, "k_shot": 1, "n_query": 1, "points_per_shape": 24, "inner_steps": 2,
    "episodes_per_epoch": 2, "meta_epochs": 1, "seed": 3,
    "plan": {"g1": [4, 6], "g2": [5], "max_parts": 6, "score_dims": [4], "embed_dim": 3, "vae_dims": [4]},
}


def write_config(path, **overrides) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({**TINY_CONFIG, **overrides}, f)
    return str(path)


@pytest.fixture(scope="module")
def trained(corpus_path, tmp_path_factory):
    """A meta-trained run directory and its config."""
    root = tmp_path_factory.mktemp("run")
    config = write_config(root / "config.json", manifest=corpus_path)
    out = root / "out"
    assert main(["meta-train", "--config", config, "--out", str(out)]) == EXIT_OK
    return {"config": config, "out": out, "checkpoint": str(out / CHECKPOINT_NAME)}


@pytest.fixture
def lamp_shape(corpus_path):
    return os.path.join(os.path.dirname(corpus_path), "lamp", "lamp_003.txt")


class TestGenData:
    def test_writes_corpus(self, tmp_path, capsys):
        code = main(["gen-data", "--out", str(tmp_path), "--categories", "mug,table",
                     "--shapes-per-category", "3", "--points", "32"])
        assert code == EXIT_OK
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert sorted(manifest["categories"]) == ["mug", "table"]
        assert manifest["categories"]["table"]["novel"]
        assert len(manifest["shapes"]) == 6
        assert "Wrote 6 shapes" in capsys.readouterr().out

    def test_unknown_category(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--categories", "chair"]) == EXIT_USAGE


class TestMetaTrain:
    def test_outputs(self, trained):
        out = trained["out"]
        for name in (CHECKPOINT_NAME, TRAIN_LOG_NAME, CONFIG_NAME):
            assert (out / name).is_file()
        log = pd.read_csv(out / TRAIN_LOG_NAME)
        assert list(log["episode"]) == [0, 1]
        assert (log["seconds"] == 0).all()

    def test_reproducible(self, trained, tmp_path, capsys):
        again = tmp_path / "again"
        assert main(["meta-train", "--config", trained["config"], "--out", str(again)]) == EXIT_OK
        assert "Meta-training finished" in capsys.readouterr().out
        for name in (CHECKPOINT_NAME, TRAIN_LOG_NAME):
            assert filecmp.cmp(trained["out"] / name, again / name, shallow=False)

    def test_manifest_flag_overrides_config(self, corpus_path, tmp_path):
        config = write_config(tmp_path / "c.json", manifest=str(tmp_path / "missing.json"))
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o"),
                     "--manifest", corpus_path]) == EXIT_OK

    def test_invalid_config(self, corpus_path, tmp_path):
        config = write_config(tmp_path / "c.json", manifest=corpus_path, n_way=0)
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_unknown_config_key(self, corpus_path, tmp_path):
        config = write_config(tmp_path / "c.json", manifest=corpus_path, learning_rate=0.1)
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_no_manifest(self, tmp_path):
        config = write_config(tmp_path / "c.json")
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_missing_manifest_file(self, tmp_path):
        config = write_config(tmp_path / "c.json", manifest=str(tmp_path / "nope.json"))
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_too_few_base_categories(self, corpus_path, tmp_path):
        config = write_config(tmp_path / "c.json", manifest=corpus_path, n_way=4)
        assert main(["meta-train", "--config", config, "--out", str(tmp_path / "o")]) == EXIT_DATA


class TestEval:
    def test_report(self, trained, corpus_path, tmp_path, capsys):
        out = tmp_path / "report.csv"
        code = main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                     "--config", trained["config"], "--out", str(out)])
        assert code == EXIT_OK
        text = capsys.readouterr().out
        assert "lamp" in text and "Mean" in text
        frame = pd.read_csv(out)
        assert set(frame["category"]) == {"lamp"}
        assert len(frame) == 1
        categories = pd.read_csv(tmp_path / "report_categories.csv")
        assert list(categories.columns) == ["category", "miou", "accuracy"]
        assert list(categories["category"]) == ["lamp", "Mean"]
        assert categories["miou"].iloc[0] == pytest.approx(frame["miou"].mean(), abs=1e-6)
        assert categories["miou"].iloc[1] == pytest.approx(categories["miou"].iloc[0], abs=1e-6)

    def test_sweep(self, trained, corpus_path, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        code = main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                     "--config", trained["config"], "--shots", "1,3", "--points", "16,24",
                     "--out", str(out)])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "== Sweep over shots and points: 4 settings =="
        assert [l.split()[0] for l in lines[1:]] == ["k=1,n=16", "k=1,n=24", "k=3,n=16", "k=3,n=24"]
        frame = pd.read_csv(out)
        assert list(frame["k_shot"]) == [1, 1, 3, 3]
        assert list(frame["points"]) == [16, 24, 16, 24]

    def test_eval_is_deterministic(self, trained, corpus_path, tmp_path):
        for name in ("a.csv", "b.csv"):
            main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                  "--config", trained["config"], "--out", str(tmp_path / name)])
        assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)

    def test_checkpoint_mode_wins(self, trained, corpus_path, tmp_path, capsys):
        config = write_config(tmp_path / "c.json", mode="B")
        code = main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                     "--config", config])
        assert code == EXIT_OK
        assert "mode=D" in capsys.readouterr().out

    def test_plan_mismatch(self, trained, corpus_path, tmp_path):
        config = write_config(tmp_path / "c.json",
                              plan={**TINY_CONFIG["plan"], "embed_dim": 5})
        assert main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                     "--config", config]) == EXIT_DATA

    def test_bad_shot_list(self, trained, corpus_path):
        assert main(["eval", "--checkpoint", trained["checkpoint"], "--manifest", corpus_path,
                     "--config", trained["config"], "--shots", "1,x"]) == EXIT_USAGE


class TestExportSeg:
    def test_adapted_export(self, trained, corpus_path, lamp_shape, tmp_path):
        out = tmp_path / "seg.txt"
        code = main(["export-seg", "--checkpoint", trained["checkpoint"], "--shape", lamp_shape,
                     "--manifest", corpus_path, "--config", trained["config"], "--out", str(out)])
        assert code == EXIT_OK
        lines = out.read_text().splitlines()
        assert len(lines) == 64
        assert all(len(l.split()) == 4 for l in lines)
        assert {int(l.split()[3]) for l in lines} <= {5, 6, 7}

    def test_plain_export(self, trained, lamp_shape, tmp_path):
        out = tmp_path / "seg.txt"
        code = main(["export-seg", "--checkpoint", trained["checkpoint"], "--shape", lamp_shape,
                     "--out", str(out)])
        assert code == EXIT_OK
        labels = {int(l.split()[3]) for l in out.read_text().splitlines()}
        assert labels <= set(range(6))

    def test_coordinates_are_as_stored(self, trained, lamp_shape, tmp_path):
        out = tmp_path / "seg.txt"
        main(["export-seg", "--checkpoint", trained["checkpoint"], "--shape", lamp_shape,
              "--out", str(out)])
        stored = [l.split()[:3] for l in open(lamp_shape) if l.strip() and not l.startswith("#")]
        exported = [l.split()[:3] for l in out.read_text().splitlines()]
        assert [[float(v) for v in row] for row in exported] == \
            [[float(v) for v in row] for row in stored]

    def test_manifest_needs_config(self, trained, corpus_path, lamp_shape, tmp_path):
        assert main(["export-seg", "--checkpoint", trained["checkpoint"], "--shape", lamp_shape,
                     "--manifest", corpus_path, "--out", str(tmp_path / "o.txt")]) == EXIT_USAGE

    def test_missing_checkpoint(self, lamp_shape, tmp_path):
        assert main(["export-seg", "--checkpoint", str(tmp_path / "none.m3ds"), "--shape", lamp_shape,
                     "--out", str(tmp_path / "o.txt")]) == EXIT_DATA

    def test_overflowing_weights(self, lamp_shape, tmp_path, capsys):
        plan = LayerPlan(**TINY_CONFIG["plan"])
        huge = {name: np.full(shape, 1e308) for name, shape in layer_shapes(plan).items()}
        path = str(tmp_path / "huge.m3ds")
        save_checkpoint(Checkpoint("A", plan, ParamBundle(plan, huge)), path)
        out = tmp_path / "o.txt"
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["export-seg", "--checkpoint", path, "--shape", lamp_shape, "--out", str(out)])
        assert code == EXIT_NUMERIC
        assert "numeric_error" in capsys.readouterr().err
        assert not out.exists()


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "checkpoint format 1" in capsys.readouterr().out

    def test_version_info(self):
        info = get_version_info()
        assert info["version"] == get_version()
        assert (info["major"], info["minor"]) == (0, 3)
        assert info["checkpoint_format"] == CHECKPOINT_FORMAT_VERSION

    def test_unknown_subcommand(self):
        assert main(["train"]) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert main(["eval", "--checkpoint", "x"]) == EXIT_USAGE
