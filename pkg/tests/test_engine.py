#!/usr/bin/env python3
"""
Tests for episodic meta-training and meta-testing.
"""

import filecmp
from dataclasses import replace

import numpy as np
import pytest

from src.backend.engine import (ModeFlags, TrainLog, bootstrap_features, draw_shots, episode_objective,
                                episode_rng, initial_state, inner_adapt, meta_test, meta_train,
                                meta_train_step, predict_overlay)
from src.backend.gradcheck import analytic_gradients, gradient_errors
from src.backend.meta_psl import MetaState
from src.backend.psl import ParamBundle, as_tensors, batch_loss
from src.backend.data import build_episode
from src.backend.validation import DataError, LeakError, ValidationError


@pytest.fixture
def episode(manifest):
    return build_episode(manifest, 2, 1, np.random.default_rng(0), n_query=1, n_points=24)


@pytest.fixture
def state(tiny_config):
    return initial_state(tiny_config.model_copy(update={"mode": "D"}))


def _perturbed(meta, scale=0.05, seed=1):
    """Nonzero heads, with the projection and trunk units switched on."""
    rng = np.random.default_rng(seed)
    params = {k: v + rng.normal(size=v.shape) * scale for k, v in meta.params.items()}
    for name in ("proj.0.bias", "f2.0.bias"):
        params[name] = params[name] + 1.0
    return MetaState(meta.plan, params)


class TestModes:
    """Tests for the weight-setting lattice."""

    def test_lattice(self):
        a, b, c, d = (ModeFlags.for_mode(m) for m in "ABCD")
        assert not (a.predict_overlay or a.sample or a.part_scores)
        assert b.predict_overlay and not b.sample
        assert c.sample and not c.part_scores
        assert d.part_scores
        assert ModeFlags.for_mode("d") == d

    def test_invalid_mode(self):
        with pytest.raises(ValidationError):
            ModeFlags.for_mode("E")


class TestInnerAdapt:
    """Tests for support-set adaptation."""

    def test_zero_steps_is_identity(self, episode, state):
        bundle, _ = state
        result = inner_adapt(episode, bundle, 0, 1e-3)
        assert len(result.losses) == 1
        for name, value in bundle.theta_t.items():
            assert np.array_equal(result.theta_t[name], value)

    def test_loss_curve_and_frozen_overlay(self, episode, state, tiny_plan):
        bundle, _ = state
        overlay = ParamBundle.initialize(tiny_plan, seed=9).theta_t
        frozen = ParamBundle(tiny_plan, bundle.theta_t, {k: v * 0.1 for k, v in overlay.items()})
        before = {k: v.copy() for k, v in frozen.theta_m.items()}
        result = inner_adapt(episode, frozen, 5, 1e-2)
        assert len(result.losses) == 6
        assert result.losses[-1] < result.losses[0]
        for name in before:
            assert np.array_equal(frozen.theta_m[name], before[name])
        assert not np.array_equal(result.theta_t["g3.0.bias"], frozen.theta_t["g3.0.bias"])

    def test_query_cloud_in_support_is_refused(self, episode, state):
        leaked = replace(episode, support=[episode.query[0]])
        with pytest.raises(LeakError):
            inner_adapt(leaked, state[0], 1, 1e-3)


class TestBootstrap:
    """Tests for bootstrap_features and predict_overlay."""

    def test_shapes(self, episode, state, tiny_plan):
        features = bootstrap_features(episode, state[0])
        n = sum(c.num_points for c in episode.support)
        assert features.descriptor.shape == (n, tiny_plan.p)
        assert features.point_grad.shape == (n, episode.num_classes)
        assert features.point_loss.shape == (n,)

    def test_deterministic(self, episode, state):
        a, b = bootstrap_features(episode, state[0]), bootstrap_features(episode, state[0])
        assert np.array_equal(a.point_grad.data, b.point_grad.data)

    def test_near_uniform_loss_at_small_weights(self, manifest, state, tiny_plan):
        episode = build_episode(manifest, 1, 2, np.random.default_rng(2), categories=["table"], n_points=24)
        small = ParamBundle(tiny_plan, {k: v * 0.1 for k, v in state[0].theta_t.items()})
        features = bootstrap_features(episode, small)
        assert features.point_loss.data.mean() == pytest.approx(np.log(2.0), rel=0.1)

    def test_mode_b_overlay_is_mean(self, episode, state, tiny_plan):
        bundle, meta = state
        features = bootstrap_features(episode, bundle)
        overlay, kl, heads = predict_overlay(features, as_tensors(meta.params), tiny_plan,
                                             ModeFlags.for_mode("B"), np.random.default_rng(0))
        assert kl is None
        assert all(not t.data.any() for t in overlay.values())

    def test_sampling_overlay_has_kl(self, episode, state, tiny_plan):
        bundle, meta = state
        features = bootstrap_features(episode, bundle)
        overlay, kl, _ = predict_overlay(features, as_tensors(meta.params), tiny_plan,
                                         ModeFlags.for_mode("C"), np.random.default_rng(0))
        assert kl.item() > 0
        assert any(t.data.any() for t in overlay.values())

    def test_overlay_scale(self, episode, state, tiny_plan):
        bundle, meta = state
        features = bootstrap_features(episode, bundle)
        weights = as_tensors(_perturbed(meta).params)
        flags = ModeFlags.for_mode("B")
        full, _, _ = predict_overlay(features, weights, tiny_plan, flags, np.random.default_rng(0))
        half, _, _ = predict_overlay(features, weights, tiny_plan, flags, np.random.default_rng(0), scale=0.5)
        assert any(t.data.any() for t in full.values())
        for name, t in full.items():
            assert np.array_equal(half[name].data, t.data * 0.5)


class TestMetaTrainStep:
    """Tests for the outer gradient of one episode."""

    def test_mode_a_rejected(self, episode, state, tiny_config):
        bundle, meta = state
        with pytest.raises(ValidationError):
            meta_train_step(episode, bundle, meta, np.random.default_rng(0), "A", tiny_config)

    def test_mode_b_zero_heads_match_baseline(self, episode, state, tiny_config):
        bundle, meta = state
        config = tiny_config.model_copy(update={"inner_steps": 0})
        step = meta_train_step(episode, bundle, meta, np.random.default_rng(0), "B", config)
        clouds = [(c.points, episode.local_labels(c)) for c in episode.query]
        baseline, _ = batch_loss(clouds, as_tensors(bundle.theta_t), bundle.plan, episode.num_classes)
        assert step.row.query_loss == baseline.item()

    def test_same_seed_same_row(self, episode, state, tiny_config):
        bundle, meta = state
        a = meta_train_step(episode, bundle, meta, np.random.default_rng(5), "D", tiny_config, 3)
        b = meta_train_step(episode, bundle, meta, np.random.default_rng(5), "D", tiny_config, 3)
        assert a.row == b.row
        for name in a.meta_grads:
            assert np.array_equal(a.meta_grads[name], b.meta_grads[name])

    def test_full_pipeline_gradients(self, manifest, state, tiny_config):
        """Mode D, no inner steps: every parameter entry against central differences."""
        bundle, meta = state
        meta = _perturbed(meta)
        episode = build_episode(manifest, 2, 1, np.random.default_rng(3), n_query=1, n_points=8)
        config = tiny_config.model_copy(update={"inner_steps": 0, "beta": 0.1})
        flags = ModeFlags.for_mode("D")
        params = {**{f"psl:{k}": v for k, v in bundle.theta_t.items()},
                  **{f"meta:{k}": v for k, v in meta.params.items()}}

        def f(p):
            theta = {k[4:]: v for k, v in p.items() if k.startswith("psl:")}
            weights = {k[5:]: v for k, v in p.items() if k.startswith("meta:")}
            return episode_objective(episode, theta, weights, bundle.plan, flags,
                                     np.random.default_rng(11), config).objective

        errors = gradient_errors(f, params)
        assert max(errors.values()) < 1e-4

        step = meta_train_step(episode, bundle, meta, np.random.default_rng(11), "D", config)
        analytic = analytic_gradients(f, params)
        for name, g in step.meta_grads.items():
            assert np.allclose(g, analytic[f"meta:{name}"], rtol=1e-12, atol=1e-15)
        for name, g in step.theta_grads.items():
            assert np.allclose(g, analytic[f"psl:{name}"], rtol=1e-12, atol=1e-15)

    def test_gradients_reach_every_group(self, episode, state, tiny_config):
        bundle, meta = state
        step = meta_train_step(episode, bundle, _perturbed(meta), np.random.default_rng(0), "D",
                               tiny_config)
        for prefix in ("f1.", "proj.", "f2.0.", "f2.g1.", "f2.g2.", "f2.g3."):
            assert any(g.any() for k, g in step.meta_grads.items() if k.startswith(prefix))
        assert any(g.any() for g in step.theta_grads.values())


class TestMetaTrain:
    """Tests for the training loop."""

    def test_smoke(self, manifest, tiny_config):
        result = meta_train(manifest, tiny_config)
        assert len(result.log.rows) == tiny_config.total_episodes
        assert all(np.isfinite(r.query_loss) for r in result.log.rows)
        _, initial_meta = initial_state(tiny_config)
        assert any(not np.array_equal(result.meta.params[k], initial_meta.params[k])
                   for k in initial_meta.params)

    def test_phase_two_freezes_theta(self, manifest, tiny_config):
        config = tiny_config.model_copy(update={"phase1_fraction": 0.0})
        result = meta_train(manifest, config)
        initial_bundle, _ = initial_state(config)
        for name, value in initial_bundle.theta_t.items():
            assert np.array_equal(result.bundle.theta_t[name], value)

    def test_mode_a_pretrains(self, manifest, tiny_config):
        config = tiny_config.model_copy(update={"mode": "A"})
        result = meta_train(manifest, config)
        assert result.meta is None
        assert len(result.log.rows) == config.total_episodes
        initial_bundle, _ = initial_state(config)
        assert any(not np.array_equal(result.bundle.theta_t[k], v)
                   for k, v in initial_bundle.theta_t.items())

    def test_workers_match_serial(self, manifest, tiny_config):
        serial = meta_train(manifest, tiny_config.model_copy(update={"meta_batch_size": 2}))
        pooled = meta_train(manifest, tiny_config.model_copy(update={"meta_batch_size": 2, "workers": 2}))
        assert serial.log.rows == pooled.log.rows
        for name, value in serial.meta.params.items():
            assert np.array_equal(pooled.meta.params[name], value)

    def test_log_is_reproducible(self, manifest, tiny_config, tmp_path):
        for name in ("a.csv", "b.csv"):
            meta_train(manifest, tiny_config).log.save_csv(str(tmp_path / name))
        assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header.split(",") == TrainLog.COLUMNS

    def test_too_few_base_categories(self, manifest, tiny_config):
        with pytest.raises(DataError):
            meta_train(manifest, tiny_config.model_copy(update={"n_way": 4}))

    def test_settings_share_pretrained_theta(self, manifest, tiny_config):
        config = tiny_config.model_copy(update={"pretrain_episodes": 2, "phase1_fraction": 0.0})
        baseline = meta_train(manifest, config.model_copy(update={"mode": "A"}))
        initial_bundle, _ = initial_state(config)
        assert any(not np.array_equal(baseline.bundle.theta_t[k], v)
                   for k, v in initial_bundle.theta_t.items())
        for mode in ("B", "D"):
            result = meta_train(manifest, config.model_copy(update={"mode": mode}))
            for name, value in baseline.bundle.theta_t.items():
                assert np.array_equal(result.bundle.theta_t[name], value), (mode, name)

    def test_pretrain_rows_precede_meta_rows(self, manifest, tiny_config):
        config = tiny_config.model_copy(update={"pretrain_episodes": 3})
        log = meta_train(manifest, config).log
        assert [r.phase for r in log.rows] == ["pretrain"] * 3 + ["meta"] * 2
        assert [r.episode for r in log.rows] == [0, 1, 2, 3, 4]
        assert len(log.query_losses("meta")) == 2
        assert list(log.to_frame()["phase"]) == ["pretrain"] * 3 + ["meta"] * 2

    def test_default_meta_run_has_no_pretraining(self, manifest, tiny_config):
        log = meta_train(manifest, tiny_config).log
        assert {r.phase for r in log.rows} == {"meta"}

    def test_mixed_support_sizes(self, manifest, tiny_config):
        config = tiny_config.model_copy(update={"train_shots": [1, 3], "episodes_per_epoch": 3})
        a, b = meta_train(manifest, config), meta_train(manifest, config)
        assert a.log.rows == b.log.rows
        assert all(np.isfinite(r.query_loss) for r in a.log.rows)


class TestDrawShots:
    def test_draws_every_listed_size(self, tiny_config):
        config = tiny_config.model_copy(update={"train_shots": [1, 3]})
        assert {draw_shots(config, np.random.default_rng(i)) for i in range(40)} == {1, 3}

    def test_fixed_size_leaves_rng_alone(self, tiny_config):
        rng, twin = np.random.default_rng(9), np.random.default_rng(9)
        assert draw_shots(tiny_config, rng) == tiny_config.k_shot
        assert rng.random() == twin.random()


class TestMetaTest:
    """Tests for meta-testing on the novel categories."""

    def test_report(self, manifest, state, tiny_config):
        bundle, meta = state
        report = meta_test(manifest, meta, bundle, tiny_config)
        assert list(report.category_miou) == ["lamp"]
        assert 0.0 <= report.mean_miou <= 1.0
        assert report.settings == {"mode": "D", "k_shot": 1, "points": 24}

    def test_deterministic(self, manifest, state, tiny_config):
        bundle, meta = state
        a = meta_test(manifest, meta, bundle, tiny_config)
        b = meta_test(manifest, meta, bundle, tiny_config)
        assert a.to_frame().equals(b.to_frame())

    def test_zero_heads_mode_b_equals_mode_a(self, manifest, state, tiny_config):
        bundle, meta = state
        a = meta_test(manifest, None, bundle, tiny_config.model_copy(update={"mode": "A"}))
        b = meta_test(manifest, meta, bundle, tiny_config.model_copy(update={"mode": "B"}))
        assert a.to_frame().equals(b.to_frame())

    def test_shot_and_point_overrides(self, manifest, state, tiny_config):
        bundle, meta = state
        report = meta_test(manifest, meta, bundle, tiny_config, k_shot=3, n_points=16)
        assert report.settings["k_shot"] == 3
        assert report.settings["points"] == 16

    def test_no_novel_categories(self, manifest, state, tiny_config):
        bundle, meta = state
        with pytest.raises(DataError):
            meta_test(manifest.with_partition(novel=[]), meta, bundle, tiny_config)

    def test_missing_meta_learner(self, manifest, state, tiny_config):
        with pytest.raises(ValidationError):
            meta_test(manifest, None, state[0], tiny_config)

    def test_episode_rng_streams_differ(self):
        a = episode_rng(0, 0, 1).standard_normal(3)
        b = episode_rng(0, 1, 1).standard_normal(3)
        assert not np.array_equal(a, b)
