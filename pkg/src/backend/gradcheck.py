#!/usr/bin/env python3
"""
Central finite-difference oracle for reverse-mode gradients.
"""

import logging
from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

LossFn = Callable[[Dict[str, Tensor]], Tensor]


def _evaluate(f: LossFn, params: Dict[str, np.ndarray]) -> float:
    return f({k: Tensor(v) for k, v in params.items()}).item()


def analytic_gradients(f: LossFn, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Gradients of ``f`` at ``params`` from one backward pass."""
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    found = backward(f(leaves))
    return {k: found.get(t, np.zeros_like(t.data)) for k, t in leaves.items()}


def gradient_errors(f: LossFn, params: Dict[str, np.ndarray], h: float = 1e-5,
                    floor: float = 1e-4, max_entries: Optional[int] = None,
                    seed: int = 0) -> Dict[str, float]:
    """
    Max relative error per parameter array between backward and central differences.

    The relative error of one entry is |a - n| / max(|a|, |n|, floor), so
    entries whose magnitude falls below ``floor`` are compared absolutely.

    Args:
        f: Scalar function of named tensors
        params: Point of evaluation
        h: Finite-difference step
        floor: Denominator floor
        max_entries: If set, check at most this many random entries per array
        seed: Seed for the entry subsample
    """
    analytic = analytic_gradients(f, params)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, value in params.items():
        flat_count = value.size
        indices = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            indices = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        worst = 0.0
        for flat in indices:
            idx = np.unravel_index(flat, value.shape)
            shifted = dict(params)
            plus = value.copy()
            plus[idx] += h
            shifted[name] = plus
            f_plus = _evaluate(f, shifted)
            minus = value.copy()
            minus[idx] -= h
            shifted[name] = minus
            f_minus = _evaluate(f, shifted)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        errors[name] = worst
        logger.debug(f"gradcheck {name}: {len(indices)} entries, max rel err {worst:.3e}")
    return errors


def finite_diff_check(f: LossFn, params: Dict[str, np.ndarray], h: float = 1e-5,
                      floor: float = 1e-4, max_entries: Optional[int] = None) -> float:
    """Max relative gradient error over all parameter arrays."""
    errors = gradient_errors(f, params, h=h, floor=floor, max_entries=max_entries)
    return max(errors.values()) if errors else 0.0
