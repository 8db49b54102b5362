"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Graph` is built fresh for every forward pass.  Each recorded
:class:`Node` keeps its forward value, its parent nodes and a closure that
maps the output gradient to one gradient per parent.  A node may also carry a
``hook`` with the same signature; when present the hook replaces the
chain-rule closure during :func:`backward`.  Hooks are how the masking code
substitutes its redefined weight and mask gradients.

Values are plain ``numpy.ndarray`` objects.  Ops preserve the dtype of their
inputs, so training runs in float32 while gradient checks may run in float64.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("graph", "index", "op", "value", "parents", "backward_fn", "hook", "name")

    def __init__(self, graph, index, op, value, parents, backward_fn, hook, name):
        self.graph = graph
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.hook = hook
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label} shape={self.value.shape}>"


class Graph:
    """Ordered record of the operations applied during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name=None, dtype=DTYPE) -> Node:
        value = np.asarray(value, dtype=dtype)
        return self._append("leaf", value, (), None, None, name)

    def record(self, op, parents, value, backward_fn, hook=None, name=None) -> Node:
        for p in parents:
            if p.graph is not self:
                raise ContractError(f"{op}: input {p!r} belongs to a different graph")
        return self._append(op, value, tuple(parents), backward_fn, hook, name)

    def _append(self, op, value, parents, backward_fn, hook, name):
        node = Node(self, len(self.nodes), op, value, parents, backward_fn, hook, name)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)


def backward(graph: Graph, loss: Node) -> dict[Node, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every node of ``graph``.

    Nodes are visited once each, in reverse recording order.  Nodes the loss
    does not depend on receive a zero gradient.
    """
    if loss.graph is not graph:
        raise ContractError("loss node is not part of this graph")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    grads: dict[Node, np.ndarray] = {loss: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.index + 1]):
        g = grads.get(node)
        if g is None or not node.parents:
            continue
        fn = node.hook if node.hook is not None else node.backward_fn
        parent_grads = fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pg.shape != parent.value.shape:
                raise ShapeError(
                    f"{node.op}: gradient for input has shape {pg.shape}, "
                    f"expected {parent.value.shape}"
                )
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    for node in graph.nodes:
        if node not in grads:
            grads[node] = np.zeros_like(node.value)
    return grads


def finite_difference_gradient(f, x, h=1e-3):
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x)
    out = np.empty(x.shape, dtype=np.float64)
    probe = x.copy()
    flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(probe))
        flat[i] = orig - h
        down = float(f(probe))
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return a.graph.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return a.graph.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return a.graph.record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(x: Node) -> Node:
    active = x.value > 0
    out = np.where(active, x.value, 0).astype(x.value.dtype)
    return x.graph.record("relu", (x,), out, lambda g: (g * active,))


def square(x: Node) -> Node:
    xv = x.value
    return x.graph.record("square", (x,), xv * xv, lambda g: (2 * g * xv,))


def sum_all(x: Node) -> Node:
    shape, dtype = x.shape, x.value.dtype
    out = np.asarray(x.value.sum(), dtype=dtype)
    return x.graph.record("sum", (x,), out, lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Node) -> Node:
    shape, dtype, n = x.shape, x.value.dtype, x.value.size
    out = np.asarray(x.value.mean(), dtype=dtype)
    return x.graph.record(
        "mean", (x,), out, lambda g: (np.full(shape, g / n, dtype=dtype),)
    )


def concat(xs: Sequence[Node], axis: int = 1) -> Node:
    xs = tuple(xs)
    if not xs:
        raise ContractError("concat needs at least one input")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([x.value for x in xs], axis=axis)
    return xs[0].graph.record("concat", xs, out, grad_fn)


# linear algebra --------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return a.graph.record(
        "matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g)
    )


def linear(x: Node, w: Node) -> Node:
    """Affine map without bias: ``x @ w.T`` for ``x`` N×in and ``w`` out×in."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} does not fit weight {wv.shape}")
    return x.graph.record(
        "linear", (x, w), xv @ wv.T, lambda g: (g @ wv, g.T @ xv)
    )


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d_values(x, w, stride=1, padding=0):
    """Cross-correlation of ``x`` (N×C×H×W) with ``w`` (F×C×kH×kW).

    Accumulation runs over (channel, row, column) of the kernel in that
    order for every output element, so the result is reproducible term by
    term against a scalar loop with the same order.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {w.shape} expects {ck}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, f, ho, wo), dtype=np.result_type(x, w))
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ci, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += w[None, :, ci, i, j, None, None] * patch[:, None]
    return out


def conv2d(x: Node, w: Node, stride: int = 1, padding: int = 0) -> Node:
    xv, wv = x.value, w.value
    out = conv2d_values(xv, wv, stride, padding)
    n, c, h, wd = xv.shape
    _, _, kh, kw = wv.shape
    ho, wo = out.shape[2:]

    def grad_fn(g):
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    rows = slice(i, i + stride * ho, stride)
                    cols = slice(j, j + stride * wo, stride)
                    gw[:, ci, i, j] = np.einsum("nfhw,nhw->f", g, xp[:, ci, rows, cols])
                    gxp[:, ci, rows, cols] += np.einsum("nfhw,f->nhw", g, wv[:, ci, i, j])
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return np.ascontiguousarray(gx), gw

    return x.graph.record("conv2d", (x, w), out, grad_fn)
