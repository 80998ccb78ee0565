#!/usr/bin/env python3
"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation records its parents and a backward rule on the output
tensor; ``backward`` walks the recorded graph once in reverse
topological order. Graphs are rebuilt on every forward pass.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .validation import ShapeError, validate_finite, validate_labels

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A float64 array plus the op record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Tuple["Tensor", ...],
                backward: BackwardFn) -> "Tensor":
        validate_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # Arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, neg(_as_tensor(other)))
    def __rsub__(self, other): return add(other, neg(self))
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"Cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._result(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"Cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._result(out, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return Tensor._result(out, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"Cannot reshape {a.shape} into {tuple(shape)}")
    original = a.shape
    return Tensor._result(a.data.reshape(shape).copy(), "reshape", (a,),
                          lambda g: (g.reshape(original),))


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return Tensor._result(out, "getitem", (a,), backward)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return Tensor._result(np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(tsum(a, axis), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return Tensor._result(out, "softplus", (a,), lambda g: (g * sigmoid_array(a.data),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"Cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._result(out, "concat", tuple(tensors), backward)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as ``n`` identical rows."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {v.shape}")
    out = np.tile(v.data, (n, 1))
    return Tensor._result(out, "tile_rows", (v,), lambda g: (g.sum(axis=0),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x·Wᵀ + b for x of shape N×in and W of shape out×in."""
    return add(matmul(x, transpose(weight)), bias)


def maxpool_points(features: Tensor) -> Tensor:
    """
    Column-wise maximum over the rows of an N×m tensor.

    The gradient of each column flows to a single row, the lowest-index
    argmax on ties.
    """
    if features.data.ndim != 2 or features.shape[0] == 0:
        raise ShapeError(f"maxpool_points needs N >= 1 rows, got shape {features.shape}")
    rows = np.argmax(features.data, axis=0)
    cols = np.arange(features.shape[1])
    out = features.data[rows, cols].copy()

    def backward(g):
        full = np.zeros_like(features.data)
        full[rows, cols] = g
        return (full,)
    return Tensor._result(out, "maxpool_points", (features,), backward)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax."""
    s = softmax_array(logits.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    return Tensor._result(s, "softmax", (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Per-point cross-entropy of row-wise softmax against integer labels.

    Returns:
        Tuple of (mean loss scalar, per-point loss vector)
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be N×c, got shape {logits.shape}")
    n, c = logits.shape
    labels = validate_labels(labels, c)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows", "labels")
    rows = np.arange(n)
    top = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - top
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    per_point = log_norm - shifted[rows, labels]

    def backward(g):
        grad = softmax_array(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)
    losses = Tensor._result(per_point, "softmax_cross_entropy", (logits,), backward)
    return mean(losses), losses


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (root last)."""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if not n.parents and n.requires_grad]


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode pass from a scalar root.

    Sets ``.grad`` on every reachable leaf that requires gradients and
    returns the same gradients keyed by leaf.

    Raises:
        ShapeError: If the root is not a scalar
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    graph = Graph.trace(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: Dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g
            leaf_grads[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaf_grads


def grad(root: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``root`` for each of ``leaves``; zeros where unreached."""
    found = backward(root)
    return [found.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]
