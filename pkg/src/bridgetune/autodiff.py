"""Minimal dense-tensor reverse-mode automatic differentiation with Adam.

Everything is float64. The graph is define-by-run: each forward op records
a node with a closure computing the local gradient rule, and the graph is
rebuilt from scratch on every forward pass. Frozen parameters are plain
Tensors with requires_grad=False; they never receive a gradient slot.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np


class ShapeMismatchError(ValueError):
    """An op received inputs whose shapes do not conform."""


class NonScalarRootError(ValueError):
    """backward() was called on a tensor with more than one element."""


class MissingGradientError(KeyError):
    """adam_step() was handed a parameter with no gradient entry."""


_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float64 array participating in the computation graph.

    A Tensor is immutable once created, except for in-place parameter
    updates performed between graph lifetimes (adam_step).
    """

    __slots__ = ("data", "requires_grad", "node_id", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GraphNode:
    """One recorded op: its kind, parent tensors, and the local grad rule.

    grad_fn maps the output gradient (ndarray) to a tuple of parent
    gradients (ndarray or None), aligned with parents.
    """

    __slots__ = ("op_kind", "parents", "grad_fn")

    def __init__(self, op_kind, parents, grad_fn):
        self.op_kind = op_kind
        self.parents = parents
        self.grad_fn = grad_fn


def _make(op_kind, parents, out_data, grad_fn):
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if _grad_enabled and out.requires_grad:
        out.node = GraphNode(op_kind, parents, grad_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_2d(op, *tensors):
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeMismatchError(f"{op}: expected 2-d input, got shape {t.data.shape}")


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", [a, b], out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.data.shape} and {b.data.shape}")

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", [a, b], out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.data.shape} and {b.data.shape}")

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", [a, b], out, grad_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", [a], c * a.data, lambda g: (c * g,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(
            f"elementwise_mul: shapes {a.data.shape} and {b.data.shape}")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make("elementwise_mul", [a, b], out, grad_fn)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make("mean_over_axis", [a], out, grad_fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", tensors, out, grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_rows", a)
    out = a.data[start:stop]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", [a], out, grad_fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    _check_2d("gather_rows", a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather_rows", [a], out, grad_fn)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _make("transpose", [a], a.data.T.copy(), lambda g: (g.T,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", [a], s, grad_fn)


def layer_norm(a: Tensor, axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance along axis. Affine terms are
    applied outside via elementwise_mul/add so their gradients come free."""
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make("layer_norm", [a], y, grad_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * local,)

    return _make("gelu", [a], out, grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make("relu", [a], a.data * mask, grad_fn)


def square(a: Tensor) -> Tensor:
    return _make("square", [a], a.data ** 2, lambda g: (2.0 * a.data * g,))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def grad_fn(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make("sum", [a], out, grad_fn)


def log(a: Tensor) -> Tensor:
    return _make("log", [a], np.log(a.data), lambda g: (g / a.data,))


def cross_entropy_with_logits(logits: Tensor, target: int) -> Tensor:
    """Scalar -log softmax(logits)[target]; logits may be any shape with
    one element per class (flattened internally)."""
    flat = logits.data.reshape(-1)
    target = int(target)
    if not 0 <= target < flat.size:
        raise ShapeMismatchError(
            f"cross_entropy_with_logits: target {target} outside {flat.size} classes")
    m = flat.max()
    exps = np.exp(flat - m)
    z = exps.sum()
    out = np.asarray(m + np.log(z) - flat[target])
    probs = exps / z

    def grad_fn(g):
        local = probs.copy()
        local[target] -= 1.0
        return (float(g) * local.reshape(logits.data.shape),)

    return _make("cross_entropy_with_logits", [logits], out, grad_fn)


_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "scalar_mul": lambda inputs, attrs: scalar_mul(inputs[0], attrs["c"]),
    "elementwise_mul": lambda inputs, attrs: elementwise_mul(*inputs),
    "mean_over_axis": lambda inputs, attrs: mean_over_axis(inputs[0], attrs["axis"]),
    "concat": lambda inputs, attrs: concat(inputs, attrs["axis"]),
    "slice_rows": lambda inputs, attrs: slice_rows(inputs[0], attrs["start"], attrs["stop"]),
    "gather_rows": lambda inputs, attrs: gather_rows(inputs[0], attrs["indices"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], attrs.get("axis", -1)),
    "layer_norm": lambda inputs, attrs: layer_norm(
        inputs[0], attrs.get("axis", 0), attrs.get("eps", 1e-5)),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "square": lambda inputs, attrs: square(inputs[0]),
    "sum": lambda inputs, attrs: tensor_sum(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "cross_entropy_with_logits": lambda inputs, attrs: cross_entropy_with_logits(
        inputs[0], attrs["target"]),
}


def apply(op_kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name onto the active graph."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op_kind {op_kind!r}")
    return _OPS[op_kind](list(inputs), attrs)


def op_kinds():
    return sorted(_OPS)


# ---------------------------------------------------------------- backward

def backward(root: Tensor) -> dict:
    """Reverse-topological accumulation from a scalar root.

    Returns a mapping node_id -> gradient Tensor covering every
    requires_grad ancestor of root.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"root has shape {root.data.shape}")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                stack.append((p, False))

    grads = {root.node_id: np.ones_like(root.data)}
    for t in reversed(topo):
        g = grads.get(t.node_id)
        if g is None or t.node is None:
            continue
        parent_grads = t.node.grad_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg

    by_id = {t.node_id: t for t in topo}
    return {nid: Tensor(g) for nid, g in grads.items()
            if by_id[nid].requires_grad}


# ---------------------------------------------------------------- optimizer

class AdamState:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.first_moment = {p.node_id: np.zeros_like(p.data) for p in params}
        self.second_moment = {p.node_id: np.zeros_like(p.data) for p in params}
        self.step_count = 0
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update; grads maps node_id -> gradient Tensor."""
    for p in params:
        if p.node_id not in grads:
            raise MissingGradientError(f"no gradient for parameter node {p.node_id}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        g = grads[p.node_id].data
        m = state.first_moment[p.node_id]
        v = state.second_moment[p.node_id]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def clip_gradients(params, grads, max_norm: float):
    """Scale gradients of params in place so the global norm is <= max_norm."""
    total = 0.0
    for p in params:
        g = grads[p.node_id].data
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            grads[p.node_id].data *= scale
    return norm
