"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every backward rule is itself written with the differentiable ops defined
here, so asking for gradients with ``create_graph=True`` yields nodes that can
be differentiated again. That is what lets the meta-gradient flow through an
inner gradient-descent loop.

    >>> x = leaf(3.0)
    >>> (g,) = grad(x * x, [x]).values()
    >>> float(g.value)
    6.0
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    NodeNotInGraphError,
    NonFiniteError,
    NonScalarOutputError,
    ShapeMismatchError,
    UnsupportedOpError,
)

SOFTPLUS_LINEAR_CUTOFF = 30.0

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def recording(enabled: bool):
    """Enable or disable graph construction for ops built inside the block."""
    prev = _recording()
    _state.record = enabled
    try:
        yield
    finally:
        _state.record = prev


def no_grad():
    return recording(False)


class Node:
    """A value in the computation graph.

    Nodes are never mutated after construction. Constants and leaves have no
    parents; ``requires_grad`` marks leaves we differentiate with respect to and
    everything computed from them.
    """

    __slots__ = ("value", "op", "parents", "requires_grad", "_backward", "__weakref__")

    def __init__(self, value, op="const", parents=(), requires_grad=False, backward=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def constant(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(_as_array(value))


def leaf(value, requires_grad: bool = True) -> Node:
    """A graph input; gradients can be requested with respect to it."""
    return Node(_as_array(value), "leaf", (), requires_grad)


def detach(node: Node) -> Node:
    """Same value, no history: gradients do not flow through the result."""
    return Node(node.value, "detach")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, op: str, parents: tuple, backward: Callable) -> Node:
    # a sum is NaN/Inf whenever any entry is; overflow of the sum itself is also rejected
    if not math.isfinite(value.sum()):
        raise NonFiniteError(f"non-finite result from op {op!r}")
    if _recording() and any(p.requires_grad for p in parents):
        return Node(value, op, parents, True, backward)
    return Node(value, op)


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape == b.value.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(shape) if d == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# --- elementwise binary -----------------------------------------------------


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), backward)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.value - b.value, "sub", (a, b), backward)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, "mul", (a, b), backward)


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise NonFiniteError("div: division by zero")

    def backward(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, "div", (a, b), backward)


def scalar_mul(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)

    def backward(g):
        return (scalar_mul(g, c),)

    return _make(a.value * c, "scalar_mul", (a,), backward)


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.value @ b.value, "matmul", (a, b), backward)


# --- elementwise unary ------------------------------------------------------


def neg(a) -> Node:
    a = _lift(a)
    return _make(-a.value, "neg", (a,), lambda g: (neg(g),))


def log(a) -> Node:
    a = _lift(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log: argument must be positive")
    return _make(np.log(a.value), "log", (a,), lambda g: (div(g, a),))


def exp(a) -> Node:
    a = _lift(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.value)
    holder = {}

    def backward(g):
        return (mul(g, holder["out"]),)

    out = _make(val, "exp", (a,), backward)
    holder["out"] = out
    return out


def sigmoid(a) -> Node:
    a = _lift(a)
    val = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    holder = {}

    def backward(g):
        s = holder["out"]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _make(val, "sigmoid", (a,), backward)
    holder["out"] = out
    return out


def softplus(a) -> Node:
    # branch form: z above the cutoff is returned as is
    a = _lift(a)
    z = a.value
    val = np.where(z > SOFTPLUS_LINEAR_CUTOFF, z, np.log1p(np.exp(np.minimum(z, SOFTPLUS_LINEAR_CUTOFF))))
    return _make(val, "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a) -> Node:
    a = _lift(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, "relu", (a,), lambda g: (mul(g, Node(mask)),))


def abs_(a) -> Node:
    a = _lift(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), "abs", (a,), lambda g: (mul(g, Node(sign)),))


# --- reductions and shape ops -------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(in_shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _make(np.sum(a.value, axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeMismatchError("mean over an empty axis")
    return scalar_mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = _lift(a)
    shape = tuple(shape)
    in_shape = a.shape
    try:
        val = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: {in_shape} -> {shape}") from None
    return _make(val, "reshape", (a,), lambda g: (reshape(g, in_shape),))


def broadcast_to(a, shape) -> Node:
    a = _lift(a)
    shape = tuple(shape)
    in_shape = a.shape
    try:
        val = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeMismatchError(f"broadcast_to: {in_shape} -> {shape}") from None
    return _make(val, "broadcast_to", (a,), lambda g: (_unbroadcast(g, in_shape),))


def transpose(a) -> Node:
    a = _lift(a)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def index_select(a, indices, axis: int = 0) -> Node:
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError("index_select: indices must be one-dimensional")
    axis = axis % a.ndim
    size = a.shape[axis]
    if idx.size and (idx.min() < -size or idx.max() >= size):
        raise ShapeMismatchError(f"index_select: index out of range for axis of size {size}")
    idx = idx % size if size else idx

    def backward(g):
        return (scatter_add(g, idx, axis, size),)

    return _make(np.take(a.value, idx, axis=axis), "index_select", (a,), backward)


def scatter_add(a, indices, axis: int, size: int) -> Node:
    """Adjoint of :func:`index_select`: accumulate slices of ``a`` into ``size`` slots."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, idx, np.moveaxis(a.value, axis, 0))

    def backward(g):
        return (index_select(g, idx, axis),)

    return _make(out, "scatter_add", (a,), backward)


def concat(inputs: Sequence, axis: int = 0) -> Node:
    nodes = [_lift(x) for x in inputs]
    if not nodes:
        raise ShapeMismatchError("concat: no inputs")
    axis = axis % nodes[0].ndim
    try:
        val = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def backward(g):
        return tuple(
            index_select(g, np.arange(lo, hi), axis) if n.requires_grad else None
            for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:])
        )

    return _make(val, "concat", tuple(nodes), backward)


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "elementwise-div": div,
    "matmul": matmul,
    "sum": sum_,
    "mean": mean,
    "neg": neg,
    "log": log,
    "exp": exp,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "relu": relu,
    "abs": abs_,
    "scalar-mul": scalar_mul,
    "index-select": index_select,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "transpose": transpose,
}


def build(kind: str, inputs: Sequence, **attrs) -> Node:
    """Apply op ``kind`` to ``inputs`` by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --- differentiation ----------------------------------------------------------


def _topo_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Node,
    wrt: Iterable[Node],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> dict[Node, Node]:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned gradients are graph nodes themselves and
    may be differentiated again. Nodes unreachable from ``output`` raise
    :class:`NodeNotInGraphError` unless ``allow_unused`` is set, in which case
    they get a zero gradient.
    """
    wrt = list(wrt)
    if output.value.size != 1:
        raise NonScalarOutputError(f"grad needs a scalar output, got shape {output.shape}")
    order = _topo_order(output) if output.requires_grad else []
    reachable = {id(n) for n in order}
    for w in wrt:
        if id(w) not in reachable and not allow_unused:
            raise NodeNotInGraphError(f"{w!r} does not contribute to the output")

    grads: dict[int, Node] = {}
    with recording(create_graph):
        if order:
            grads[id(output)] = Node(np.ones_like(output.value))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    out = {}
    for w in wrt:
        g = grads.get(id(w))
        out[w] = g if g is not None else Node(np.zeros_like(w.value))
    return out


def finite_difference_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    at: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Largest relative error between ``analytic`` and central differences.

    For each named tensor the error is ``||analytic - fd|| / (||fd|| + 1e-12)``
    (Euclidean norms); the maximum over tensors is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in at.items()}

    def evaluate() -> float:
        val = float(f(point))
        if not np.isfinite(val):
            raise NonFiniteError("function value is not finite")
        return val

    worst = 0.0
    for name, arr in point.items():
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2 * step)
        a = np.asarray(analytic[name], dtype=np.float64).reshape(fd.shape)
        err = np.linalg.norm(a - fd) / (np.linalg.norm(fd) + 1e-12)
        worst = max(worst, float(err))
    return worst
