"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every op call creates a :class:`Node` that
remembers its inputs and a backward rule.  Calling :func:`backward` on a scalar
root walks the graph in reverse topological order and accumulates gradients
into every node.

Only vectors and matrices are supported.  ``add`` and ``mul`` follow numpy
broadcasting (the model needs row and column broadcasts); gradients are summed
back to the input shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2


class Node:
    """A value in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None, requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents: tuple[Node, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, name: str | None = None) -> Node:
    return Node(value, name=name)


def const(value) -> Node:
    """A leaf that never needs a gradient (masks, selectors, fixed inputs)."""
    return Node(value, op="const", requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _make(value, parents, backward_fn, op) -> Node:
    return Node(value, parents, backward_fn, op, requires_grad=any(p.requires_grad for p in parents))


# ---------------------------------------------------------------------------
# op catalog


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _make(a.value @ b.value, (a, b), backward, "matmul")


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward, "add")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward, "mul")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[n.shape for n in nodes]} on axis {axis}") from None
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for n, piece in zip(nodes, np.split(g, bounds, axis=axis)):
            if n.requires_grad:
                n.grad += piece

    return _make(value, nodes, backward, "concat")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Node:
    x = _as_node(x)
    scale = np.where(x.value > 0, 1.0, slope)

    def backward(g):
        x.grad += g * scale

    return _make(x.value * scale, (x,), backward, "leaky_relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Node:
    x = _as_node(x)
    s = _stable_sigmoid(np.atleast_1d(x.value)).reshape(x.shape)

    def backward(g):
        x.grad += g * s * (1.0 - s)

    return _make(s, (x,), backward, "sigmoid")


def softmax(x) -> Node:
    """Softmax of a vector, or of every row of a matrix."""
    x = _as_node(x)
    if x.value.ndim not in (1, 2) or x.value.size == 0:
        raise ValueError(f"softmax: expected a non-empty vector or matrix, got shape {x.shape}")
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, (x,), backward, "softmax")


def log(x) -> Node:
    x = _as_node(x)

    def backward(g):
        x.grad += g / x.value

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.value)
    return _make(value, (x,), backward, "log")


def sum(x, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, or along ``axis`` keeping the reduced dimension."""
    x = _as_node(x)
    if axis is None:
        value = np.asarray(x.value.sum())
    else:
        value = x.value.sum(axis=axis, keepdims=True)

    def backward(g):
        x.grad += np.broadcast_to(g, x.shape)

    return _make(value, (x,), backward, "sum")


def mean(x) -> Node:
    x = _as_node(x)
    n = x.value.size
    if n == 0:
        raise ValueError("mean: empty input")

    def backward(g):
        x.grad += np.broadcast_to(g / n, x.shape)

    return _make(np.asarray(x.value.mean()), (x,), backward, "mean")


def dot(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g * b.value
        if b.requires_grad:
            b.grad += g * a.value

    return _make(np.asarray(a.value @ b.value), (a, b), backward, "dot")


def gather(table, index) -> Node:
    """Rows ``table[index]``; repeated indices accumulate gradient."""
    table = _as_node(table)
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2 or index.ndim != 1:
        raise ValueError(f"gather: expected a matrix and an index vector, got {table.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ValueError(f"gather: index out of range for table of shape {table.shape}")

    def backward(g):
        np.add.at(table.grad, index, g)

    return _make(table.value[index], (table,), backward, "gather")


def reshape(x, shape: tuple[int, ...]) -> Node:
    x = _as_node(x)
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        x.grad += g.reshape(x.shape)

    return _make(value, (x,), backward, "reshape")


OPS: dict[str, Callable[..., Node]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "sum": sum,
    "mean": mean,
    "dot": dot,
    "gather": gather,
    "reshape": reshape,
}


def apply(op_kind: str, inputs: Sequence, **attrs) -> Node:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass


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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into every node reachable from ``root``.

    Returns a map from leaf to gradient.  Leaves listed in ``wrt`` that are not
    reachable from ``root`` map to zeros.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.requires_grad:
            node.backward_fn(node.grad)
    grads = {n: n.grad for n in order if n.is_leaf and n.requires_grad}
    if wrt is not None:
        grads = {n: grads.get(n, np.zeros_like(n.value)) for n in wrt}
    return grads


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Node], Node], point, step: float = 1e-4) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    ``f`` maps a leaf holding the parameter vector to a scalar node.  The error
    at coordinate i is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    point = np.array(point, dtype=np.float64)
    x = leaf(point)
    out = f(x)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("grad_check: non-finite value at the base point")
    analytic = backward(out, [x])[x].ravel()
    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        probes = []
        for sign in (1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * step
            v = float(f(const(shifted.reshape(point.shape))).value)
            if not np.isfinite(v):
                raise FloatingPointError(f"grad_check: non-finite value probing coordinate {i}")
            probes.append(v)
        numeric = (probes[0] - probes[1]) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def grad_check_params(
    f: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    step: float = 1e-4,
    names: Sequence[str] | None = None,
) -> float:
    """:func:`grad_check` over a dict of named arrays, flattened in ``names`` order."""
    names = list(names if names is not None else params)
    shapes = [params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    fixed = {k: v for k, v in params.items() if k not in set(names)}

    def unflatten(x: Node) -> dict[str, Node]:
        out: dict[str, Node] = {k: const(v) for k, v in fixed.items()}
        column = reshape(x, (x.value.size, 1))
        offset = 0
        for n, s, size in zip(names, shapes, sizes):
            out[n] = reshape(gather(column, np.arange(offset, offset + size)), s)
            offset += size
        return out

    point = np.concatenate([params[n].ravel() for n in names])
    return grad_check(lambda x: f(unflatten(x)), point, step)
