#!/usr/bin/env python3
"""
Meta part segmentation learner.

The score network f1 weighs each point's gradient and loss features, a
shared projection plus mean pooling turns them into one task vector, and
the VAE trunk f2 maps that vector to a mean and a log standard deviation
for every weight of each PSL layer group. theta_m is sampled from those
heads with the reparameterization trick.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .config import LayerPlan
from .psl import GROUPS, glorot_init, group_names, group_size, layer_shapes, mlp
from .tensor import Tensor, concat, exp, linear, relu, softplus
from .validation import ShapeError

logger = logging.getLogger(__name__)

INITIAL_LOG_SIGMA = -3.0


def meta_shapes(plan: LayerPlan) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every meta-learner parameter array by name."""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    widths = [plan.p, *plan.score_dims]
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        shapes[f"f1.{i}.weight"] = (fan_out, fan_in)
        shapes[f"f1.{i}.bias"] = (fan_out,)
    shapes["f1.head.weight"] = (1, plan.score_dims[-1])
    shapes["f1.head.bias"] = (1,)
    shapes["proj.0.weight"] = (plan.embed_dim, plan.max_parts + 1)
    shapes["proj.0.bias"] = (plan.embed_dim,)
    widths = [plan.embed_dim, *plan.vae_dims]
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        shapes[f"f2.{i}.weight"] = (fan_out, fan_in)
        shapes[f"f2.{i}.bias"] = (fan_out,)
    for group in GROUPS:
        w = group_size(plan, group)
        shapes[f"f2.{group}.weight"] = (2 * w, plan.vae_dims[-1])
        shapes[f"f2.{group}.bias"] = (2 * w,)
    return shapes


@dataclass
class MetaState:
    """Parameters of f1, the task projection and f2 (with its per-group heads)."""
    plan: LayerPlan
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in meta_shapes(self.plan).items():
            if name not in self.params or self.params[name].shape != shape:
                raise ShapeError(f"Meta parameter {name} missing or not of shape {shape}", name)

    @classmethod
    def initialize(cls, plan: LayerPlan, seed) -> "MetaState":
        """
        Fan-based init for f1, the projection and the f2 trunk. Head weights
        start at zero, so the first mean is 0 and sigma = exp(-3).
        """
        shapes = meta_shapes(plan)
        heads = {f"f2.{g}.weight" for g in GROUPS} | {f"f2.{g}.bias" for g in GROUPS}
        params = glorot_init({k: v for k, v in shapes.items() if k not in heads},
                             np.random.default_rng(seed))
        for group in GROUPS:
            w = group_size(plan, group)
            params[f"f2.{group}.weight"] = np.zeros(shapes[f"f2.{group}.weight"])
            params[f"f2.{group}.bias"] = np.concatenate([np.zeros(w), np.full(w, INITIAL_LOG_SIGMA)])
        return cls(plan, {name: params[name] for name in shapes})

    @property
    def target_sizes(self) -> Dict[str, int]:
        return {group: group_size(self.plan, group) for group in GROUPS}

    def copy(self) -> "MetaState":
        return MetaState(self.plan, {k: v.copy() for k, v in self.params.items()})


@dataclass
class TaskEmbedding:
    per_point: Tensor
    pooled: Tensor


@dataclass
class VaeHeads:
    """Mean and log standard deviation of theta_m, per layer group."""
    mu: Dict[str, Tensor]
    log_sigma: Dict[str, Tensor]

    def sigma(self, group: str) -> Tensor:
        return exp(self.log_sigma[group])

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self.mu.values()) + sum(t.size for t in self.log_sigma.values())


def part_score(descriptor: Tensor, weights: Mapping[str, Tensor], plan: LayerPlan) -> Tensor:
    """Positive per-point score lambda_x = softplus(f1(descriptor))."""
    if descriptor.data.ndim != 2 or descriptor.shape[1] != plan.p:
        raise ShapeError(f"descriptor must be N×{plan.p}, got {descriptor.shape}", "descriptor")
    hidden = mlp(descriptor, weights, "f1", len(plan.score_dims))
    raw = linear(hidden, weights["f1.head.weight"], weights["f1.head.bias"])
    return softplus(raw).reshape(descriptor.shape[0])


def part_specific_feature(scores: Tensor, point_grad: Tensor, point_loss: Tensor,
                          width: Optional[int] = None) -> Tensor:
    """
    Rows [lambda_x * grad_x, lambda_x * l_x]; grad_x is zero-padded on the
    right to ``width`` columns when given.
    """
    n = scores.shape[0]
    if point_grad.data.ndim != 2 or point_grad.shape[0] != n or point_loss.shape != (n,):
        raise ShapeError(f"Expected shapes N, N×c, N with N={n}; got {point_grad.shape} "
                         f"and {point_loss.shape}", "s_x")
    c = point_grad.shape[1]
    if width is not None and width > c:
        point_grad = concat([point_grad, Tensor(np.zeros((n, width - c)))], axis=1)
    elif width is not None and width < c:
        raise ShapeError(f"Gradient feature has {c} columns, more than the width {width}", "s_x")
    column = scores.reshape(n, 1)
    return concat([column * point_grad, column * point_loss.reshape(n, 1)], axis=1)


def task_embed(features: Tensor, weights: Mapping[str, Tensor]) -> TaskEmbedding:
    """Shared per-point projection followed by a mean over points."""
    if features.data.ndim != 2 or features.shape[0] < 1:
        raise ShapeError(f"s_x needs N >= 1 rows, got {features.shape}", "s_x")
    per_point = relu(linear(features, weights["proj.0.weight"], weights["proj.0.bias"]))
    return TaskEmbedding(per_point, per_point.mean(axis=0))


def vae_heads(embedding: TaskEmbedding, weights: Mapping[str, Tensor], plan: LayerPlan) -> VaeHeads:
    """(mu, log sigma) of theta_m for g1, g2 and g3 from the pooled task vector."""
    trunk = mlp(embedding.pooled.reshape(1, plan.embed_dim), weights, "f2", len(plan.vae_dims))
    mu, log_sigma = {}, {}
    for group in GROUPS:
        w = group_size(plan, group)
        head = linear(trunk, weights[f"f2.{group}.weight"], weights[f"f2.{group}.bias"]).reshape(2 * w)
        mu[group] = head[:w]
        log_sigma[group] = head[w:]
    return VaeHeads(mu, log_sigma)


def reparameterize(mu: Tensor, sigma: Tensor, eps: np.ndarray) -> Tensor:
    """mu + sigma ⊙ eps with eps held constant."""
    if eps.shape != mu.shape:
        raise ShapeError(f"Noise shape {eps.shape} does not match mean shape {mu.shape}", "eps")
    return mu + sigma * Tensor(eps)


def draw_noise(heads: VaeHeads, rng: np.random.Generator, n_samples: int = 1) -> Dict[str, np.ndarray]:
    """
    Standard normal noise per group. Several samples are averaged, which is
    the same as averaging the reparameterized draws.
    """
    return {group: rng.standard_normal((n_samples, mu.size)).mean(axis=0)
            for group, mu in heads.mu.items()}


def unflatten(flat: Mapping[str, Tensor], plan: LayerPlan) -> Dict[str, Tensor]:
    """Split per-group flat vectors into layer-shaped overlays."""
    shapes = layer_shapes(plan)
    overlay = {}
    for group in GROUPS:
        offset = 0
        for name in group_names(plan, group):
            size = int(np.prod(shapes[name]))
            overlay[name] = flat[group][offset:offset + size].reshape(*shapes[name])
            offset += size
    return overlay


def sample_theta_m(heads: VaeHeads, plan: LayerPlan, noise: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, Tensor]:
    """
    theta_m overlays from the heads: mu + sigma ⊙ eps per group, or mu alone
    when ``noise`` is None.
    """
    flat = {}
    for group in GROUPS:
        if noise is None:
            flat[group] = heads.mu[group]
        else:
            flat[group] = reparameterize(heads.mu[group], heads.sigma(group), np.asarray(noise[group]))
    return unflatten(flat, plan)


def kl_to_standard_normal(heads: VaeHeads) -> Tensor:
    """Sum over groups of ½ Σ (mu² + sigma² − 1 − 2 log sigma)."""
    total = None
    for group, mu in heads.mu.items():
        log_sigma = heads.log_sigma[group]
        sigma_sq = exp(log_sigma * 2.0)
        term = (mu * mu + sigma_sq - 1.0 - log_sigma * 2.0).sum() * 0.5
        total = term if total is None else total + term
    return total
