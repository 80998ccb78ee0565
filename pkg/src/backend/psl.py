#!/usr/bin/env python3
"""
Part segmentation learner.

g1 embeds every point, a column max gives the global feature, and the
descriptor [f_x, g_x, x] runs through g2 and g3 to per-point logits.
Every layer's effective weight is the element-wise sum of the trained
weight theta_t and the meta-predicted overlay theta_m.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import LayerPlan
from .tensor import (Tensor, concat, linear, maxpool_points, relu, softmax,
                     softmax_cross_entropy, tile_rows)
from .validation import ShapeError

logger = logging.getLogger(__name__)

GROUPS = ("g1", "g2", "g3")


def group_widths(plan: LayerPlan) -> Dict[str, List[int]]:
    """Input and output widths of each layer group, input first."""
    return {
        "g1": [3, *plan.g1],
        "g2": [plan.p, *plan.g2],
        "g3": [plan.q, plan.max_parts],
    }


def layer_shapes(plan: LayerPlan) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every PSL parameter array by name, in g1, g2, g3 order."""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for group, widths in group_widths(plan).items():
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            shapes[f"{group}.{i}.weight"] = (fan_out, fan_in)
            shapes[f"{group}.{i}.bias"] = (fan_out,)
    return shapes


def group_names(plan: LayerPlan, group: str) -> List[str]:
    return [name for name in layer_shapes(plan) if name.startswith(f"{group}.")]


def group_size(plan: LayerPlan, group: str) -> int:
    """Flattened parameter count w_i of one group."""
    shapes = layer_shapes(plan)
    return sum(int(np.prod(shapes[name])) for name in group_names(plan, group))


def glorot_init(shapes: Mapping[str, Tuple[int, ...]], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor


@dataclass
class ParamBundle:
    """Trained weights theta_t and the shape-congruent overlay theta_m."""
    plan: LayerPlan
    theta_t: Dict[str, np.ndarray]
    theta_m: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = layer_shapes(self.plan)
        if not self.theta_m:
            self.theta_m = {name: np.zeros(shape) for name, shape in shapes.items()}
        for overlay_name, overlay in (("theta_t", self.theta_t), ("theta_m", self.theta_m)):
            if set(overlay) != set(shapes):
                raise ShapeError(f"{overlay_name} layers {sorted(overlay)} do not match the plan",
                                 overlay_name)
            for name, shape in shapes.items():
                if overlay[name].shape != shape:
                    raise ShapeError(f"{overlay_name}[{name}] has shape {overlay[name].shape}, "
                                     f"expected {shape}", name)

    @classmethod
    def initialize(cls, plan: LayerPlan, seed) -> "ParamBundle":
        return cls(plan, glorot_init(layer_shapes(plan), np.random.default_rng(seed)))

    def copy(self) -> "ParamBundle":
        return ParamBundle(self.plan, {k: v.copy() for k, v in self.theta_t.items()},
                           {k: v.copy() for k, v in self.theta_m.items()})

    def effective(self) -> Dict[str, np.ndarray]:
        return effective_params(self.theta_t, self.theta_m)

    def layer(self, name: str) -> LayerParams:
        """Effective parameters of one layer, e.g. ``layer("g2.0")``."""
        eff = self.effective()
        return LayerParams(Tensor(eff[f"{name}.weight"]), Tensor(eff[f"{name}.bias"]))


def effective_params(theta_t: Mapping, theta_m: Mapping) -> Dict:
    """
    Element-wise sum theta_t + theta_m, layer by layer.

    Works on numpy arrays and on Tensors alike.

    Raises:
        ShapeError: If the overlays are not congruent
    """
    if set(theta_t) != set(theta_m):
        raise ShapeError("theta_t and theta_m name different layers")
    combined = {}
    for name, value in theta_t.items():
        overlay = theta_m[name]
        if value.shape != overlay.shape:
            raise ShapeError(f"Layer {name}: theta_t {value.shape} vs theta_m {overlay.shape}", name)
        combined[name] = value + overlay
    return combined


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def mlp(x: Tensor, weights: Mapping[str, Tensor], prefix: str, n_layers: int,
        final_activation: bool = True) -> Tensor:
    """Shared per-point MLP: linear layers ``prefix.i`` with ReLU between them."""
    for i in range(n_layers):
        x = linear(x, weights[f"{prefix}.{i}.weight"], weights[f"{prefix}.{i}.bias"])
        if final_activation or i < n_layers - 1:
            x = relu(x)
    return x


@dataclass
class PslOutput:
    """Intermediate and final quantities of one PSL pass over a cloud."""
    local: Tensor
    global_feature: Tensor
    descriptor: Tensor
    point_feature: Tensor
    logits: Tensor
    loss: Optional[Tensor] = None
    point_loss: Optional[Tensor] = None
    point_grad: Optional[Tensor] = None

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)


def embed(points: Tensor, weights: Mapping[str, Tensor], plan: LayerPlan) -> Tuple[Tensor, Tensor]:
    """Local features f_x = g1(x) and the global feature g_x = column max of f_x."""
    if points.data.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be N×3, got shape {points.shape}", "points")
    local = mlp(points, weights, "g1", len(plan.g1))
    return local, maxpool_points(local)


def predict(points, weights: Mapping[str, Tensor], plan: LayerPlan,
            num_classes: Optional[int] = None) -> PslOutput:
    """
    Forward pass: descriptor rows [f_x, g_x, x], p_x = g2(descriptor),
    logits = g3(p_x) restricted to the first ``num_classes`` columns.
    """
    points = points if isinstance(points, Tensor) else Tensor(points)
    c = plan.max_parts if num_classes is None else num_classes
    if not 1 <= c <= plan.max_parts:
        raise ShapeError(f"Episode has {c} classes, layer plan allows at most {plan.max_parts}",
                         "num_classes")
    local, global_feature = embed(points, weights, plan)
    n = points.shape[0]
    descriptor = concat([local, tile_rows(global_feature, n), points], axis=1)
    point_feature = mlp(descriptor, weights, "g2", len(plan.g2))
    logits = mlp(point_feature, weights, "g3", 1, final_activation=False)
    if c < plan.max_parts:
        logits = logits[:, :c]
    return PslOutput(local, global_feature, descriptor, point_feature, logits)


def loss_and_pointgrads(points, labels: np.ndarray, weights: Mapping[str, Tensor],
                        plan: LayerPlan, num_classes: int) -> PslOutput:
    """
    Forward pass plus the per-point loss l_x and the per-point gradient
    of l_x with respect to the point's logits, softmax(o_x) - onehot(v_x).
    """
    out = predict(points, weights, plan, num_classes)
    out.loss, out.point_loss = softmax_cross_entropy(out.logits, labels)
    onehot = np.zeros(out.logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    out.point_grad = softmax(out.logits) - Tensor(onehot)
    return out


def batch_loss(clouds: Sequence[Tuple[np.ndarray, np.ndarray]], weights: Mapping[str, Tensor],
               plan: LayerPlan, num_classes: int) -> Tuple[Tensor, List[PslOutput]]:
    """Mean cross-entropy over every point of every (points, labels) pair."""
    outputs = [loss_and_pointgrads(p, l, weights, plan, num_classes) for p, l in clouds]
    if len(outputs) == 1:
        return outputs[0].loss, outputs
    return concat([o.point_loss for o in outputs]).mean(), outputs
