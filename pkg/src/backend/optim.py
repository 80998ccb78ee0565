#!/usr/bin/env python3
"""
First-order optimizers over named parameter arrays.
"""

from typing import Dict, Optional

import numpy as np

from .validation import ShapeError, ValidationError

Params = Dict[str, np.ndarray]


class Optimizer:
    """Base class holding the learning rate and the step counter."""

    kind = "base"

    def __init__(self, lr: float):
        if not lr > 0:
            raise ValidationError(f"Learning rate must be positive, got {lr}", "learning_rate")
        self.lr = float(lr)
        self.t = 0

    def step(self, params: Params, grads: Params) -> Params:
        """
        Apply one update.

        Args:
            params: Current parameter arrays by name
            grads: Gradient arrays with the same names and shapes

        Returns:
            New parameter arrays; the inputs are left untouched
        """
        for name, value in params.items():
            g = grads.get(name)
            if g is None or g.shape != value.shape:
                raise ShapeError(
                    f"Gradient for '{name}' has shape {None if g is None else g.shape}, "
                    f"expected {value.shape}",
                    name,
                )
        self.t += 1
        return self._update(params, grads)

    def _update(self, params: Params, grads: Params) -> Params:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, params: Params, grads: Params) -> Params:
        return {name: value - self.lr * grads[name] for name, value in params.items()}


class Adam(Optimizer):
    """Adam with bias-corrected moments keyed by parameter name."""

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Params = {}
        self.v: Params = {}

    def _update(self, params: Params, grads: Params) -> Params:
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, value in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def make_optimizer(kind: str, lr: float, **kwargs) -> Optimizer:
    """Build an optimizer by kind name ("sgd" or "adam")."""
    kinds = {"sgd": SGD, "adam": Adam}
    try:
        return kinds[kind.lower()](lr, **kwargs)
    except KeyError:
        raise ValidationError(f"Unknown optimizer kind: {kind}", "optimizer")


def opt_step(opt: Optimizer, params: Params, grads: Params,
             frozen: Optional[set] = None) -> Params:
    """
    Update ``params`` with ``grads``; names in ``frozen`` pass through unchanged.
    """
    frozen = frozen or set()
    active = {k: v for k, v in params.items() if k not in frozen}
    updated = opt.step(active, {k: grads[k] for k in active if k in grads})
    return {k: updated.get(k, params[k]) for k in params}
