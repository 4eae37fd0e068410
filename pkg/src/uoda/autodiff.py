"""Tape-style reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records every node in creation order, which is already a
topological order, so ``backward`` simply walks the tape in reverse.  Graphs
are cheap and meant to be rebuilt for every minibatch.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Broadcasting is
limited to exact shape matches and scalars; the only exception is
:func:`add_row`, which adds a bias vector to every row of a matrix.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Node",
    "Graph",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "add_row",
    "relu",
    "exp",
    "log_softmax",
    "sum_all",
    "mean_all",
    "rows",
    "grad_scale",
    "stop_gradient",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, a_shape, b_shape):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{op}: incompatible shapes {self.a_shape} and {self.b_shape}")


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "grad", "_backward", "name")

    def __init__(self, graph: "Graph", op: str, inputs: Sequence["Node"], value: np.ndarray,
                 backward_fn: Optional[BackwardFn] = None, name: Optional[str] = None):
        self.graph = graph
        self.op = op
        self.inputs = tuple(n.id for n in inputs)
        self.value = np.asarray(value, dtype=np.float64)
        self.value.flags.writeable = False
        self.grad = np.zeros_like(value)
        self._backward = backward_fn
        self.name = name
        self.id = graph._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(_lift(self.graph, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return sub(_lift(self.graph, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self.graph, other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(_lift(self.graph, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(graph: "Graph", x) -> Node:
    if isinstance(x, Node):
        return x
    return graph.constant(x)


class Graph:
    """Ordered node store with a registry of trainable leaves."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameter_ids: Dict[str, int] = {}

    def _register(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value, name: Optional[str] = None) -> Node:
        return Node(self, "const", (), as_tensor(value).copy(), None, name)

    def parameter(self, name: str, value) -> Node:
        if name in self.parameter_ids:
            raise ContractError(f"parameter {name!r} already registered in this graph")
        node = Node(self, "param", (), as_tensor(value).copy(), None, name)
        self.parameter_ids[name] = node.id
        return node

    def param_node(self, name: str) -> Node:
        return self.nodes[self.parameter_ids[name]]

    def zero_grad(self):
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: self.nodes[i].grad.copy() for name, i in self.parameter_ids.items()}


def _same_graph(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ContractError("operands belong to different graphs")
    return g


def _check_elementwise(op: str, a: Node, b: Node):
    if a.shape == b.shape or a.value.size == 1 or b.value.size == 1:
        return
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    # scalar-broadcast operands receive the summed gradient
    if grad.shape == tuple(shape):
        return grad
    return np.full(shape, grad.sum())


def add(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return Node(g, "add", (a, b), a.value + b.value,
                lambda up: (_unbroadcast(up, sa), _unbroadcast(up, sb)))


def sub(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return Node(g, "sub", (a, b), a.value - b.value,
                lambda up: (_unbroadcast(up, sa), _unbroadcast(-up, sb)))


def mul(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    _check_elementwise("mul", a, b)
    av, bv = a.value, b.value
    return Node(g, "mul", (a, b), av * bv,
                lambda up: (_unbroadcast(up * bv, av.shape), _unbroadcast(up * av, bv.shape)))


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return Node(x.graph, "scale", (x,), x.value * c, lambda up: (up * c,))


def neg(x: Node) -> Node:
    return Node(x.graph, "neg", (x,), -x.value, lambda up: (-up,))


def matmul(a: Node, b: Node) -> Node:
    g = _same_graph(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Node(g, "matmul", (a, b), av @ bv, lambda up: (up @ bv.T, av.T @ up))


def add_row(x: Node, bias: Node) -> Node:
    """Add a length-n bias vector to every row of a [B, n] matrix."""
    g = _same_graph(x, bias)
    if x.value.ndim != 2 or bias.value.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError("add_row", x.shape, bias.shape)
    return Node(g, "add_row", (x, bias), x.value + bias.value,
                lambda up: (up, up.sum(axis=0)))


def relu(x: Node) -> Node:
    # subgradient 0 at exactly 0
    gate = (x.value > 0).astype(np.float64)
    return Node(x.graph, "relu", (x,), np.maximum(x.value, 0.0), lambda up: (up * gate,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(x.graph, "exp", (x,), out, lambda up: (up * out,))


def log_softmax(logits: Node) -> Node:
    z = logits.value
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractError(f"log_softmax expects a [B, K] matrix with K >= 2, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def back(up):
        return (up - probs * up.sum(axis=1, keepdims=True),)

    return Node(logits.graph, "log_softmax", (logits,), out, back)


def sum_all(x: Node) -> Node:
    shape = x.shape
    return Node(x.graph, "sum", (x,), np.asarray(x.value.sum()),
                lambda up: (np.full(shape, float(up)),))


def mean_all(x: Node) -> Node:
    n = x.value.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scale(sum_all(x), 1.0 / n)


def rows(x: Node, start: int, stop: int) -> Node:
    """Slice rows ``start:stop`` of a matrix."""
    shape = x.shape
    if x.value.ndim != 2 or not (0 <= start <= stop <= shape[0]):
        raise ContractError(f"invalid row slice {start}:{stop} of shape {shape}")

    def back(up):
        full = np.zeros(shape)
        full[start:stop] = up
        return (full,)

    return Node(x.graph, "rows", (x,), x.value[start:stop].copy(), back)


def grad_scale(x: Node, c: float) -> Node:
    """Identity forward; multiplies the upstream gradient by ``c`` (c = -1 reverses it)."""
    c = float(c)
    if c == 1.0:
        return Node(x.graph, "grad_scale", (x,), x.value.copy(), lambda up: (up,))
    return Node(x.graph, "grad_scale", (x,), x.value.copy(), lambda up: (up * c,))


def stop_gradient(x: Node) -> Node:
    return Node(x.graph, "stop_gradient", (x,), x.value.copy(), lambda up: (None,))


def backward(graph: Graph, loss: Node) -> Dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss`` and return accumulated parameter gradients.

    Gradients of parameter leaves accumulate across calls until
    :meth:`Graph.zero_grad`; intermediate gradients are recomputed on every
    call so repeated calls add exactly one more copy of the gradient.
    """
    if loss.graph is not graph:
        raise ContractError("loss node does not belong to this graph")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    local: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        up = local.pop(node.id, None)
        if up is None:
            continue
        if node._backward is None:
            node.grad = node.grad + up
            continue
        node.grad = up
        for input_id, g in zip(node.inputs, node._backward(up)):
            if g is None:
                continue
            if input_id in local:
                local[input_id] = local[input_id] + g
            else:
                local[input_id] = g
    return graph.gradients()
