#!/usr/bin/env python3
"""
Episodic meta-training and meta-testing.

Weight settings:
    A  theta_m is zero; theta_t is pretrained on pooled base data and
       fine-tuned on the support set.
    B  theta_m is the deterministic mean predicted by the meta-learner.
    C  theta_m is sampled from the VAE heads and the loss carries a KL term.
    D  C plus the per-point part scores of f1.

With ``pretrain_episodes`` set, every setting first pretrains theta_t with
the same supervised episodes, so B, C and D start from A's network.

Inner adaptation is a stop-gradient stage: the query pass runs on
theta_t + stopgrad(adapted - theta_t), so outer gradients reach theta_t
and the meta-learner without differentiating through the inner steps.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig
from .data import DatasetManifest, Episode, PointCloud, build_episode
from .meta_psl import (MetaState, VaeHeads, draw_noise, kl_to_standard_normal, part_score,
                       part_specific_feature, sample_theta_m, task_embed, vae_heads)
from .metrics import SegReport, ShapeResult, accuracy, aggregate, shape_miou
from .optim import Adam
from .psl import ParamBundle, PslOutput, as_tensors, batch_loss, effective_params, predict
from .tensor import Tensor, backward, concat
from .validation import DataError, LeakError, ValidationError

logger = logging.getLogger(__name__)

# Independent random streams per run seed
TRAIN_STREAM = 0
TEST_STREAM = 1
INIT_STREAM = 2
PRETRAIN_STREAM = 5


@dataclass(frozen=True)
class ModeFlags:
    """Mechanisms switched on by a weight setting; each adds to the previous."""
    predict_overlay: bool = False
    sample: bool = False
    part_scores: bool = False

    @classmethod
    def for_mode(cls, mode: str) -> "ModeFlags":
        try:
            return {
                "A": cls(),
                "B": cls(predict_overlay=True),
                "C": cls(predict_overlay=True, sample=True),
                "D": cls(predict_overlay=True, sample=True, part_scores=True),
            }[mode.upper()]
        except (KeyError, AttributeError):
            raise ValidationError(f"Invalid weight setting {mode!r}; choose A, B, C or D", "mode")


@dataclass
class TrainLogRow:
    episode: int
    support_loss_first: float
    support_loss_last: float
    query_loss: float
    query_miou: float
    seconds: float
    phase: str = "meta"


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)

    COLUMNS = ["episode", "support_loss_first", "support_loss_last",
               "query_loss", "query_miou", "seconds", "phase"]

    def append(self, row: TrainLogRow) -> None:
        self.rows.append(row)

    def query_losses(self, phase: Optional[str] = None) -> List[float]:
        return [r.query_loss for r in self.rows if phase is None or r.phase == phase]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.rows], columns=self.COLUMNS)

    def save_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


@dataclass
class AdaptResult:
    theta_t: Dict[str, np.ndarray]
    losses: List[float]


@dataclass
class BootstrapFeatures:
    """Inputs of the meta-learner, gathered over every support point."""
    descriptor: Tensor
    point_grad: Tensor
    point_loss: Tensor


@dataclass
class EpisodeObjective:
    objective: Tensor
    query_loss: Tensor
    kl: Optional[Tensor]
    adapted: AdaptResult
    outputs: List[PslOutput]


@dataclass
class StepResult:
    meta_grads: Dict[str, np.ndarray]
    theta_grads: Dict[str, np.ndarray]
    row: TrainLogRow
    objective: float


@dataclass
class MetaTrainResult:
    meta: Optional[MetaState]
    bundle: ParamBundle
    log: TrainLog


def episode_rng(seed: int, stream: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *index])


def draw_shots(config: RunConfig, rng: np.random.Generator) -> int:
    """Support size of one training episode: k_shot, or a draw from train_shots."""
    if not config.train_shots:
        return config.k_shot
    return int(rng.choice(config.train_shots))


def _labelled(episode: Episode, clouds: Sequence[PointCloud]) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(c.points, episode.local_labels(c)) for c in clouds]


def _support(episode: Episode) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Support arrays; refuses any cloud that came from a query pool."""
    tainted = [c.name for c in episode.support if c.is_query]
    if tainted:
        raise LeakError(f"Query shapes {tainted} reached an adaptation stage", "support")
    return _labelled(episode, episode.support)


def inner_adapt(episode: Episode, bundle: ParamBundle, steps: int, lr: float) -> AdaptResult:
    """
    Full-batch Adam on the support loss, updating theta_t only.

    ``bundle.theta_m`` is the fixed overlay. The returned losses hold the
    support loss before every step plus the loss after the last one.
    """
    clouds = _support(episode)
    overlay = as_tensors(bundle.theta_m)
    theta_t = {k: v.copy() for k, v in bundle.theta_t.items()}
    opt = Adam(lr)
    losses = []
    for step in range(steps):
        leaves = as_tensors(theta_t, requires_grad=True)
        loss, _ = batch_loss(clouds, effective_params(leaves, overlay), bundle.plan, episode.num_classes)
        found = backward(loss)
        losses.append(loss.item())
        theta_t = opt.step(theta_t, {k: found.get(t, np.zeros_like(t.data)) for k, t in leaves.items()})
        logger.debug(f"inner step {step}: support loss {losses[-1]:.6f}")
    final, _ = batch_loss(clouds, effective_params(as_tensors(theta_t), overlay), bundle.plan,
                          episode.num_classes)
    losses.append(final.item())
    return AdaptResult(theta_t, losses)


def bootstrap_features(episode: Episode, bundle: ParamBundle,
                       weights: Optional[Mapping[str, Tensor]] = None) -> BootstrapFeatures:
    """
    One PSL pass over the support set with a zero overlay, yielding the
    descriptor, the per-point logit gradient and the per-point loss.

    ``weights`` lets a caller pass theta_t as graph leaves.
    """
    clouds = _support(episode)
    weights = weights if weights is not None else as_tensors(bundle.theta_t)
    _, outputs = batch_loss(clouds, weights, bundle.plan, episode.num_classes)
    if len(outputs) == 1:
        out = outputs[0]
        return BootstrapFeatures(out.descriptor, out.point_grad, out.point_loss)
    return BootstrapFeatures(
        concat([o.descriptor for o in outputs]),
        concat([o.point_grad for o in outputs]),
        concat([o.point_loss for o in outputs]),
    )


def predict_overlay(features: BootstrapFeatures, meta_weights: Mapping[str, Tensor], plan,
                    flags: ModeFlags, rng: np.random.Generator,
                    n_samples: int = 1, scale: float = 1.0) -> Tuple[Dict[str, Tensor], Optional[Tensor], VaeHeads]:
    """
    theta_m from the support features: scores, s_x, task embedding, VAE heads
    and (when sampling) a reparameterized draw, multiplied by ``scale``.

    Returns:
        Tuple of (theta_m overlays, KL term or None, heads)
    """
    n = features.descriptor.shape[0]
    if flags.part_scores:
        scores = part_score(features.descriptor, meta_weights, plan)
    else:
        scores = Tensor(np.ones(n))
    s_x = part_specific_feature(scores, features.point_grad, features.point_loss, width=plan.max_parts)
    heads = vae_heads(task_embed(s_x, meta_weights), meta_weights, plan)
    if flags.sample:
        overlay = sample_theta_m(heads, plan, draw_noise(heads, rng, n_samples))
        kl = kl_to_standard_normal(heads)
    else:
        overlay, kl = sample_theta_m(heads, plan), None
    if scale != 1.0:
        overlay = {k: t * scale for k, t in overlay.items()}
    return overlay, kl, heads


def evaluate_shapes(episode: Episode, clouds: Sequence[PointCloud], weights: Mapping[str, Tensor],
                    plan, manifest_parts: Mapping[str, Sequence[int]]) -> List[ShapeResult]:
    """Per-shape mIoU and accuracy in the categories' global part ids."""
    results = []
    for cloud in clouds:
        out = predict(cloud.points, weights, plan, episode.num_classes)
        pred = episode.global_labels(out.predictions())
        results.append(ShapeResult(cloud.category, cloud.name,
                                   shape_miou(pred, cloud.labels, manifest_parts[cloud.category]),
                                   accuracy(pred, cloud.labels)))
    return results


def episode_objective(episode: Episode, theta_t: Mapping[str, Tensor], meta_weights: Mapping[str, Tensor],
                      plan, flags: ModeFlags, rng: np.random.Generator, config: RunConfig) -> EpisodeObjective:
    """
    Query loss (+ beta·KL when sampling) as a function of theta_t and the
    meta-learner parameters, with the inner adaptation as a constant shift.
    """
    bundle = ParamBundle(plan, {k: t.data for k, t in theta_t.items()})
    features = bootstrap_features(episode, bundle, theta_t)
    overlay, kl, _ = predict_overlay(features, meta_weights, plan, flags, rng,
                                     config.theta_m_samples, config.overlay_scale)

    frozen = ParamBundle(plan, bundle.theta_t, {k: t.data for k, t in overlay.items()})
    adapted = inner_adapt(episode, frozen, config.inner_steps, config.inner_lr)
    shifted = {k: theta_t[k] + Tensor(adapted.theta_t[k] - bundle.theta_t[k]) for k in theta_t}
    weights = effective_params(shifted, overlay)

    query_loss, outputs = batch_loss(_labelled(episode, episode.query), weights, plan, episode.num_classes)
    objective = query_loss + kl * config.beta if kl is not None and config.beta > 0 else query_loss
    return EpisodeObjective(objective, query_loss, kl, adapted, outputs)


def meta_train_step(episode: Episode, bundle: ParamBundle, meta: MetaState, rng: np.random.Generator,
                    mode: str, config: RunConfig, episode_id: int = 0,
                    parts: Optional[Mapping[str, Sequence[int]]] = None) -> StepResult:
    """
    Outer gradients of query loss (+ beta·KL when sampling) for one episode.

    Raises:
        ValidationError: For mode A, which has no meta-learner
    """
    flags = ModeFlags.for_mode(mode)
    if not flags.predict_overlay:
        raise ValidationError("meta_train_step needs weight setting B, C or D", "mode")
    started = time.perf_counter()
    theta_leaves = as_tensors(bundle.theta_t, requires_grad=True)
    meta_leaves = as_tensors(meta.params, requires_grad=True)
    result = episode_objective(episode, theta_leaves, meta_leaves, bundle.plan, flags, rng, config)
    found = backward(result.objective)

    parts = parts or {}
    mious = []
    for cloud, out in zip(episode.query, result.outputs):
        pred = episode.global_labels(out.predictions())
        category_parts = parts.get(cloud.category, sorted(episode.label_map))
        mious.append(shape_miou(pred, cloud.labels, category_parts))

    row = TrainLogRow(
        episode=episode_id,
        support_loss_first=result.adapted.losses[0],
        support_loss_last=result.adapted.losses[-1],
        query_loss=result.query_loss.item(),
        query_miou=float(np.mean(mious)),
        seconds=time.perf_counter() - started if config.record_wall_time else 0.0,
    )
    return StepResult(
        meta_grads={k: found.get(t, np.zeros_like(t.data)) for k, t in meta_leaves.items()},
        theta_grads={k: found.get(t, np.zeros_like(t.data)) for k, t in theta_leaves.items()},
        row=row,
        objective=result.objective.item(),
    )


def pretrain_step(episode: Episode, bundle: ParamBundle, opt: Adam, config: RunConfig,
                  episode_id: int, parts: Mapping[str, Sequence[int]]) -> Tuple[ParamBundle, TrainLogRow]:
    """One supervised step of theta_t on every shape of a base-category episode."""
    started = time.perf_counter()
    plan = bundle.plan
    clouds = list(episode.support) + list(episode.query)
    leaves = as_tensors(bundle.theta_t, requires_grad=True)
    loss, outputs = batch_loss(_labelled(episode, clouds), leaves, plan, episode.num_classes)
    found = backward(loss)
    n_support = len(episode.support)
    support_loss = concat([o.point_loss for o in outputs[:n_support]]).mean().item()
    query_loss = concat([o.point_loss for o in outputs[n_support:]]).mean().item()
    mious = [shape_miou(episode.global_labels(o.predictions()), c.labels, parts[c.category])
             for c, o in zip(clouds[n_support:], outputs[n_support:])]
    theta_t = opt.step(bundle.theta_t, {k: found.get(t, np.zeros_like(t.data)) for k, t in leaves.items()})
    row = TrainLogRow(episode_id, support_loss, support_loss,
                      query_loss, float(np.mean(mious)),
                      time.perf_counter() - started if config.record_wall_time else 0.0, "pretrain")
    return ParamBundle(plan, theta_t), row


def _partition(manifest: DatasetManifest, config: RunConfig) -> DatasetManifest:
    if config.categories is None and config.novel is None:
        return manifest
    return manifest.with_partition(config.categories, config.novel)


def _average(grads: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    if len(grads) == 1:
        return grads[0]
    return {k: sum(g[k] for g in grads) / len(grads) for k in grads[0]}


def initial_state(config: RunConfig) -> Tuple[ParamBundle, Optional[MetaState]]:
    seeds = np.random.SeedSequence([config.seed, INIT_STREAM]).generate_state(2)
    bundle = ParamBundle.initialize(config.plan, int(seeds[0]))
    meta = None if config.mode == "A" else MetaState.initialize(config.plan, int(seeds[1]))
    return bundle, meta


def meta_train(manifest: DatasetManifest, config: RunConfig, bundle: Optional[ParamBundle] = None,
               meta: Optional[MetaState] = None) -> MetaTrainResult:
    """
    Episodic training over the base categories.

    ``config.pretrain_total`` supervised episodes come first and are all
    weight setting A does. B, C and D then update the meta-learner every
    meta-batch and, during the first ``phase1_fraction`` of the episodes,
    the theta_t initialization too. Log rows are numbered across both phases.
    """
    manifest = _partition(manifest, config)
    base = manifest.base_categories
    if len(base) < config.n_way:
        raise DataError(f"{len(base)} base categories cannot form {config.n_way}-way episodes")
    parts = {c: manifest.schemas[c].part_ids for c in manifest.schemas}
    init_bundle, init_meta = initial_state(config)
    bundle = init_bundle if bundle is None else bundle
    meta = init_meta if meta is None else meta
    flags = ModeFlags.for_mode(config.mode)
    log = TrainLog()
    pretrain_total = config.pretrain_total
    total = config.total_episodes
    pretrain_opt = Adam(config.outer_lr)
    theta_opt = Adam(config.outer_lr)
    meta_opt = Adam(config.meta_learning_rate)
    phase1_end = int(round(config.phase1_fraction * total))

    def sample(stream: int, index: int) -> Tuple[Episode, np.random.Generator]:
        rng = episode_rng(config.seed, stream, index)
        episode = build_episode(manifest, config.n_way, draw_shots(config, rng), rng, categories=base,
                                n_query=config.n_query, n_points=config.points_per_shape)
        return episode, rng

    logger.info(f"Pretraining theta_t: {pretrain_total} episodes over {base}")
    for index in range(pretrain_total):
        episode, _ = sample(PRETRAIN_STREAM, index)
        bundle, row = pretrain_step(episode, bundle, pretrain_opt, config, index, parts)
        log.append(row)
        logger.info(f"episode {index}: pretrain loss {row.support_loss_first:.4f}, "
                    f"query mIoU {row.query_miou:.4f}")
    if not flags.predict_overlay:
        return MetaTrainResult(None, bundle, log)

    def run(index: int, current: ParamBundle, current_meta: MetaState) -> StepResult:
        episode, rng = sample(TRAIN_STREAM, index)
        return meta_train_step(episode, current, current_meta, rng, config.mode, config,
                               pretrain_total + index, parts)

    logger.info(f"Meta-training mode {config.mode}: {total} episodes over {base}")
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for start in range(0, total, config.meta_batch_size):
            indices = range(start, min(start + config.meta_batch_size, total))
            results = list(pool.map(lambda i: run(i, bundle, meta), indices))
            meta = MetaState(meta.plan, meta_opt.step(meta.params, _average([r.meta_grads for r in results])))
            if start < phase1_end:
                bundle = ParamBundle(bundle.plan,
                                     theta_opt.step(bundle.theta_t, _average([r.theta_grads for r in results])))
            for r in results:
                log.append(r.row)
                logger.info(f"episode {r.row.episode}: query loss {r.row.query_loss:.4f}, "
                            f"query mIoU {r.row.query_miou:.4f}")
    return MetaTrainResult(meta, bundle, log)


def adapt_and_predict(episode: Episode, bundle: ParamBundle, meta: Optional[MetaState], config: RunConfig,
                      rng: np.random.Generator) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], AdaptResult]:
    """
    Meta-test adaptation of one task: predict theta_m from the support set,
    then fine-tune theta_t on the support set under that overlay.

    Returns:
        Tuple of (adapted theta_t, theta_m, adaptation result)
    """
    flags = ModeFlags.for_mode(config.mode)
    if flags.predict_overlay:
        if meta is None:
            raise ValidationError(f"Weight setting {config.mode} needs a trained meta-learner", "mode")
        features = bootstrap_features(episode, bundle)
        overlay, _, _ = predict_overlay(features, as_tensors(meta.params), bundle.plan, flags, rng,
                                        config.theta_m_samples, config.overlay_scale)
        theta_m = {k: t.data for k, t in overlay.items()}
    else:
        theta_m = {k: np.zeros_like(v) for k, v in bundle.theta_t.items()}
    adapted = inner_adapt(episode, ParamBundle(bundle.plan, bundle.theta_t, theta_m),
                          config.inner_steps, config.inner_lr)
    return adapted.theta_t, theta_m, adapted


def meta_test(manifest: DatasetManifest, meta: Optional[MetaState], bundle: ParamBundle, config: RunConfig,
              k_shot: Optional[int] = None, n_points: Optional[int] = None, label: str = "") -> SegReport:
    """
    Adapt to every novel category from its support shapes and score the
    whole query pool.

    Raises:
        DataError: If the manifest declares no novel categories
    """
    manifest = _partition(manifest, config)
    novel = manifest.novel_categories
    if not novel:
        raise DataError(f"Manifest '{manifest.name}' declares no novel categories")
    k_shot = k_shot or config.meta_test_shots
    n_points = n_points or config.points_per_shape
    parts = {c: manifest.schemas[c].part_ids for c in manifest.schemas}
    results: List[ShapeResult] = []
    for c_index, category in enumerate(novel):
        for task in range(config.test_episodes):
            rng = episode_rng(config.seed, TEST_STREAM, c_index, task)
            episode = build_episode(manifest, 1, k_shot, rng, categories=[category], n_query=0,
                                    n_points=n_points)
            theta_t, theta_m, adapted = adapt_and_predict(episode, bundle, meta, config, rng)
            weights = as_tensors(effective_params(theta_t, theta_m))
            task_results = evaluate_shapes(episode, episode.query, weights, bundle.plan, parts)
            results.extend(task_results)
            logger.info(f"meta-test {category} task {task}: support loss {adapted.losses[0]:.4f} -> "
                        f"{adapted.losses[-1]:.4f}, query mIoU "
                        f"{np.mean([r.miou for r in task_results]):.4f}")
    report = aggregate(results, label=label or f"mode {config.mode}")
    report.settings = {"mode": config.mode, "k_shot": k_shot, "points": n_points}
    return report
