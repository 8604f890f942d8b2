"""Small reverse-mode autodiff engine over float64 numpy arrays.

Tensors are plain ``numpy.ndarray`` values (always float64). A :class:`Node`
wraps a value together with its accumulated gradient and the rule that
propagates gradients to its parents. Everything needed to train the GNNs in
this package is here: matmul, elementwise arithmetic, ReLU, (log-)softmax,
segment means for pooling, sparse neighbour aggregation, batch norm,
dropout and Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: Sequence["Node"] = (),
                 op: str = "leaf", backward: Callable[[np.ndarray], None] | None = None):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value) -> Node:
    return Node(value, requires_grad=True)


def const(value) -> Node:
    return Node(value, requires_grad=False)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, parents: Sequence[Node], op: str, backward) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, parents=parents if needs else (), op=op,
                backward=backward if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        node.grad = node.grad + g


# --------------------------------------------------------------------- ops


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.value @ b.value

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(out, (a, b), "matmul", backward)


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", backward)


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.value * c, (a,), "scale", backward)


def square(a) -> Node:
    a = _lift(a)

    def backward(g):
        _accum(a, 2.0 * a.value * g)

    return _make(a.value * a.value, (a,), "square", backward)


def exp(a) -> Node:
    a = _lift(a)
    out = np.exp(a.value)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), "exp", backward)


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), "relu", backward)


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out, (a,), "sum", backward)


def mean(a, axis: int | None = None) -> Node:
    a = _lift(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def detach(a) -> Node:
    a = _lift(a)
    return const(a.value.copy())


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> Node:
    x = _lift(logits)
    out = softmax_array(x.value)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), "softmax", backward)


def log_softmax(logits) -> Node:
    x = _lift(logits)
    out = log_softmax_array(x.value)
    probs = np.exp(out)

    def backward(g):
        _accum(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), "log_softmax", backward)


def segment_sizes(segment_ids: np.ndarray, num_segments: int | None = None) -> np.ndarray:
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ContractError("segment ids must be one-dimensional")
    if ids.size and np.any(np.diff(ids) < 0):
        raise ContractError("segment ids must be non-decreasing")
    if num_segments is None:
        num_segments = int(ids[-1]) + 1 if ids.size else 0
    counts = np.bincount(ids, minlength=num_segments)
    if counts.size != num_segments or np.any(counts == 0):
        raise ContractError("empty segment: every graph needs at least one node")
    return counts


def segment_mean(x, segment_ids, num_segments: int | None = None) -> Node:
    """Average rows of ``x`` that share a segment id."""
    x = _lift(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_mean: {ids.shape[0]} ids for {x.shape[0]} rows")
    counts = segment_sizes(ids, num_segments)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    out = np.add.reduceat(x.value, starts, axis=0) / counts[:, None]

    def backward(g):
        _accum(x, (g / counts[:, None])[ids])

    return _make(out, (x,), "segment_mean", backward)


def spmm(matrix: sp.csr_matrix, x) -> Node:
    """Constant sparse matrix times dense node (neighbour aggregation)."""
    x = _lift(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {matrix.shape} by {x.shape}")
    out = np.asarray(matrix @ x.value)
    transposed = matrix.T.tocsr()

    def backward(g):
        _accum(x, np.asarray(transposed @ g))

    return _make(out, (x,), "spmm", backward)


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    if p <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, mask: np.ndarray) -> Node:
    """Inverted dropout with a precomputed (already rescaled) mask."""
    return mul(x, const(mask))


def batch_norm_train(x, gamma, beta, eps: float = 1e-5) -> tuple[Node, np.ndarray, np.ndarray]:
    """Normalise rows with batch statistics; returns (out, batch mean, biased var)."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = xhat * gamma.value + beta.value
    n = x.shape[0]

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        gx = g * gamma.value
        _accum(x, inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)))

    return _make(out, (x, gamma, beta), "batch_norm", backward), mu, var


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5) -> Node:
    inv = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    shifted = sub(x, const(running_mean))
    return add(mul(shifted, mul(gamma, const(inv))), beta)


# ---------------------------------------------------------------- backward


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Populate ``grad`` on every node reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; call :func:`zero_grad` between
    steps. Returns a map from each trainable leaf to its gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._backward is not None:
            node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value) if loss._backward is not None else loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return {n: n.grad for n in order if n._backward is None and n.requires_grad}


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Moments are created lazily on first call."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ShapeError(f"adam_step: parameter {i} has shape {p.shape}, grad {g.shape}")
        m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g
        state.first_moment[i], state.second_moment[i] = m, v
        updated.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return updated, state


class Adam:
    """Adam over a fixed list of parameter nodes."""

    def __init__(self, params: Sequence[Node], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        new, _ = adam_step([p.value for p in self.params], [p.grad for p in self.params], self.state)
        for p, v in zip(self.params, new):
            p.value = v

    def zero_grad(self) -> None:
        zero_grad(self.params)
