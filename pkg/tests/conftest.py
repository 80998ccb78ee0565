#!/usr/bin/env python3
"""
Shared fixtures: a tiny layer plan, a matching run config and a small
synthetic corpus written once per session.
"""

import pytest

from src.backend.config import SEED_ENV_VAR, LayerPlan, RunConfig
from src.backend.data import load_manifest
from src.backend.synthetic import write_corpus


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    """Keep a developer's seed override out of the tests."""
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture
def tiny_plan():
    """A layer plan small enough for exhaustive finite differences."""
    return LayerPlan(g1=(4, 6), g2=(5,), max_parts=6, score_dims=(4,), embed_dim=3, vae_dims=(4,))


@pytest.fixture
def tiny_config(tiny_plan):
    """Two episodes of 2-way 1-shot training on 24-point clouds."""
    return RunConfig(n_way=2, k_shot=1, n_query=1, points_per_shape=24, inner_steps=2,
                     episodes_per_epoch=2, meta_epochs=1, seed=3, plan=tiny_plan)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    """Four categories, four 64-point shapes each; lamp is the novel category."""
    out = tmp_path_factory.mktemp("corpus")
    return write_corpus(str(out), ["barbell", "table", "mug", "lamp"], 4, 64, seed=0, novel=["lamp"])


@pytest.fixture
def manifest(corpus_path):
    return load_manifest(corpus_path)
