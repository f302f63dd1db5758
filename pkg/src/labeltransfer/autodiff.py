"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

The graph is define-by-run: every operation appends a node to a Graph and
returns a Tensor handle. `forward` replays the whole graph from its leaves,
`backward` walks it in reverse to accumulate exact gradients. All arrays are
row-major float64.
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Raised on malformed graphs or shape mismatches, naming the node."""


class Tensor:
    """Handle for one node of a Graph. Not user-constructed directly."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph, node_id):
        self.graph = graph
        self.node_id = node_id

    @property
    def data(self):
        return self.graph.values[self.node_id]

    @property
    def shape(self):
        return self.data.shape

    # arithmetic sugar, always routed through the owning graph
    def __add__(self, other):
        return self.graph.add(self, self.graph.as_tensor(other))

    def __sub__(self, other):
        return self.graph.sub(self, self.graph.as_tensor(other))

    def __mul__(self, other):
        return self.graph.mul(self, self.graph.as_tensor(other))

    def __truediv__(self, other):
        return self.graph.div(self, self.graph.as_tensor(other))

    def __neg__(self):
        return self.graph.neg(self)

    def __rmul__(self, other):
        return self.graph.mul(self.graph.as_tensor(other), self)

    def __radd__(self, other):
        return self.graph.add(self.graph.as_tensor(other), self)

    def __rsub__(self, other):
        return self.graph.sub(self.graph.as_tensor(other), self)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Node:
    __slots__ = ("op", "inputs", "attrs")

    def __init__(self, op, inputs, attrs):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs


class Graph:
    """Ordered list of nodes in topological (construction) order.

    `values[i]` holds the current output array of node i; leaves own their
    arrays, interior nodes are recomputed by `forward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.parameters: list[int] = []

    # ------------------------------------------------------------------ build

    def _append(self, op, inputs, attrs, value):
        self.nodes.append(_Node(op, [t.node_id for t in inputs], attrs))
        self.values.append(value)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, trainable=False):
        value = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        t = self._append("leaf", [], {}, value)
        if trainable:
            self.parameters.append(t.node_id)
        return t

    def as_tensor(self, x):
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise GraphError("tensor belongs to a different graph")
            return x
        return self.leaf(x)

    def _unary(self, op, a, **attrs):
        value = _FORWARD[op](attrs, a.data)
        return self._append(op, [a], attrs, value)

    def _binary(self, op, a, b, **attrs):
        try:
            value = _FORWARD[op](attrs, a.data, b.data)
        except ValueError as exc:
            raise GraphError(
                f"{op} at node {len(self.nodes)}: incompatible shapes "
                f"{a.data.shape} and {b.data.shape}"
            ) from exc
        return self._append(op, [a, b], attrs, value)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def matmul(self, a, b):
        return self._binary("matmul", a, b)

    def neg(self, a):
        return self._unary("neg", a)

    def relu(self, a):
        return self._unary("relu", a)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def log(self, a):
        return self._unary("log", a)

    def exp(self, a):
        return self._unary("exp", a)

    def power(self, a, exponent):
        return self._unary("power", a, exponent=float(exponent))

    def clip(self, a, lo, hi):
        return self._unary("clip", a, lo=float(lo), hi=float(hi))

    def softmax(self, a, axis=-1):
        return self._unary("softmax", a, axis=int(axis))

    def sum(self, a, axis=None, keepdims=False):
        if axis is not None and not isinstance(axis, tuple):
            axis = (int(axis),)
        return self._unary("sum", a, axis=axis, keepdims=bool(keepdims),
                           in_shape=a.data.shape)

    def mean(self, a, axis=None, keepdims=False):
        count = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
        s = self.sum(a, axis=axis, keepdims=keepdims)
        return self.mul(s, self.leaf(1.0 / float(count)))

    def reshape(self, a, shape):
        return self._unary("reshape", a, shape=tuple(shape), in_shape=a.data.shape)

    def transpose(self, a, axes):
        return self._unary("transpose", a, axes=tuple(axes))

    def broadcast_to(self, a, shape):
        return self._unary("broadcast", a, shape=tuple(shape), in_shape=a.data.shape)

    def concat(self, tensors, axis=-1):
        arrays = [t.data for t in tensors]
        value = np.concatenate(arrays, axis=axis)
        attrs = {"axis": int(axis), "splits": [a.shape[axis] for a in arrays]}
        return self._append("concat", list(tensors), attrs, value)

    def take(self, a, indices, axis=0):
        indices = np.asarray(indices, dtype=np.intp)
        return self._unary("take", a, indices=indices, axis=int(axis),
                           in_shape=a.data.shape)

    def cosine(self, a, b):
        """Cosine similarity along the last axis, broadcasting leading axes.

        Clamped to [-1, 1]; a zero vector on either side yields similarity 0
        with zero gradient.
        """
        return self._binary("cosine", a, b)

    def affine(self, x, w, b):
        """x @ w + b with b broadcast over leading axes."""
        return self.add(self.matmul(x, w), b)

    # ------------------------------------------------------------- evaluation

    def recompute(self):
        """Replay every non-leaf node from current leaf values."""
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                continue
            ins = [self.values[j] for j in node.inputs]
            self.values[i] = _FORWARD[node.op](node.attrs, *ins)


def forward(graph, output=None):
    """Recompute the graph and return the value of `output` (default: last node)."""
    if not graph.nodes:
        raise GraphError("empty graph")
    graph.recompute()
    if output is None:
        return graph.values[-1]
    return graph.values[output.node_id]


def backward(graph, loss):
    """Exact reverse-mode gradients of scalar `loss` w.r.t. every node.

    Returns a dict node-id -> gradient array (same shape as the node value)
    for all nodes that influence the loss, parameters included.
    """
    lv = graph.values[loss.node_id]
    if lv.size != 1:
        raise GraphError(f"loss node {loss.node_id} is not scalar: shape {lv.shape}")
    grads = {loss.node_id: np.ones_like(lv)}
    for i in range(loss.node_id, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.op == "leaf":
            continue
        ins = [graph.values[j] for j in node.inputs]
        in_grads = _BACKWARD[node.op](node.attrs, g, ins, graph.values[i])
        for j, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if j in grads:
                grads[j] = grads[j] + ig
            else:
                grads[j] = ig
    return grads


def grad_check(graph, loss, h=1e-5):
    """Compare analytic gradients against central finite differences.

    Returns a dict node-id -> max relative error over the parameter entries.
    Entries where both gradients are ~0 count as error 0.
    """
    if not graph.parameters:
        raise GraphError("graph has no parameters")
    forward(graph, loss)
    grads = backward(graph, loss)
    report = {}
    for pid in graph.parameters:
        analytic = grads.get(pid)
        if analytic is None:
            analytic = np.zeros_like(graph.values[pid])
        theta = graph.values[pid]
        worst = 0.0
        flat = theta.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = forward(graph, loss).item()
            flat[k] = orig - h
            down = forward(graph, loss).item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            diff = abs(a - numeric)
            if diff < 1e-10:
                continue
            worst = max(worst, diff / max(abs(a), abs(numeric)))
        report[pid] = worst
    forward(graph, loss)
    return report


# ------------------------------------------------------------- op registry

def _fw_sum(attrs, a):
    return np.asarray(a.sum(axis=attrs["axis"], keepdims=attrs["keepdims"]),
                      dtype=np.float64)


def _bw_sum(attrs, g, ins, out):
    shape = attrs["in_shape"]
    axis, keepdims = attrs["axis"], attrs["keepdims"]
    if axis is None:
        return [np.broadcast_to(g.reshape(()), shape).copy()]
    if not keepdims:
        g = np.expand_dims(g, axis=tuple(sorted(ax % len(shape) for ax in axis)))
    return [np.broadcast_to(g, shape).copy()]


def _fw_softmax(attrs, a):
    ax = attrs["axis"]
    z = a - a.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True)


def _bw_softmax(attrs, g, ins, out):
    ax = attrs["axis"]
    dot = (g * out).sum(axis=ax, keepdims=True)
    return [out * (g - dot)]


def _fw_cosine(attrs, a, b):
    dot = (a * b).sum(axis=-1)
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0.0, dot / np.where(denom > 0.0, denom, 1.0), 0.0)
    return np.clip(s, -1.0, 1.0)


def _bw_cosine(attrs, g, ins, out):
    a, b = np.broadcast_arrays(ins[0], ins[1])
    na = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=-1, keepdims=True))
    ok = (na > 0.0) & (nb > 0.0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a * b).sum(axis=-1, keepdims=True)
    s = dot / (na_s * nb_s)
    ga = (b / (na_s * nb_s) - s * a / (na_s * na_s)) * np.where(ok, 1.0, 0.0)
    gb = (a / (na_s * nb_s) - s * b / (nb_s * nb_s)) * np.where(ok, 1.0, 0.0)
    gexp = g[..., None]
    return [_unbroadcast(gexp * ga, ins[0].shape),
            _unbroadcast(gexp * gb, ins[1].shape)]


def _bw_matmul(attrs, g, ins, out):
    a, b = ins
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    at = np.swapaxes(a, -1, -2) if a.ndim >= 2 else a
    bt = np.swapaxes(b, -1, -2) if b.ndim >= 2 else b
    if a.ndim == 1:
        ga = g @ bt
        gb = np.outer(a, g) if b.ndim == 2 else a[:, None] * g
    elif b.ndim == 1:
        ga = g[..., None] * b
        gb = at @ g
    else:
        ga = g @ bt
        gb = at @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _bw_power(attrs, g, ins, out):
    p = attrs["exponent"]
    x = ins[0]
    if p == 0.0:
        return [np.zeros_like(x)]
    if p == 1.0:
        return [g.copy()]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = p * np.power(x, p - 1.0)
    d = np.where(x == 0.0, 0.0, d)  # subgradient 0 at the origin
    return [g * d]


def _bw_concat(attrs, g, ins, out):
    splits = np.cumsum(attrs["splits"])[:-1]
    return list(np.split(g, splits, axis=attrs["axis"]))


def _fw_take(attrs, a):
    return np.take(a, attrs["indices"], axis=attrs["axis"])


def _bw_take(attrs, g, ins, out):
    ga = np.zeros(attrs["in_shape"], dtype=np.float64)
    np.add.at(np.swapaxes(ga, 0, attrs["axis"]), attrs["indices"],
              np.swapaxes(g, 0, attrs["axis"]))
    return [ga]


_FORWARD = {
    "add": lambda at, a, b: a + b,
    "sub": lambda at, a, b: a - b,
    "mul": lambda at, a, b: a * b,
    "div": lambda at, a, b: a / b,
    "matmul": lambda at, a, b: a @ b,
    "neg": lambda at, a: -a,
    "relu": lambda at, a: np.maximum(a, 0.0),
    "sigmoid": lambda at, a: _sigmoid(a),
    "log": lambda at, a: np.log(a),
    "exp": lambda at, a: np.exp(a),
    "power": lambda at, a: np.power(a, at["exponent"]),
    "clip": lambda at, a: np.clip(a, at["lo"], at["hi"]),
    "softmax": _fw_softmax,
    "sum": _fw_sum,
    "reshape": lambda at, a: a.reshape(at["shape"]),
    "transpose": lambda at, a: np.transpose(a, at["axes"]),
    "broadcast": lambda at, a: np.broadcast_to(a, at["shape"]).copy(),
    "concat": lambda at, *arrays: np.concatenate(arrays, axis=at["axis"]),
    "take": _fw_take,
    "cosine": _fw_cosine,
}

_BACKWARD = {
    "add": lambda at, g, ins, out: [_unbroadcast(g, ins[0].shape),
                                    _unbroadcast(g, ins[1].shape)],
    "sub": lambda at, g, ins, out: [_unbroadcast(g, ins[0].shape),
                                    _unbroadcast(-g, ins[1].shape)],
    "mul": lambda at, g, ins, out: [_unbroadcast(g * ins[1], ins[0].shape),
                                    _unbroadcast(g * ins[0], ins[1].shape)],
    "div": lambda at, g, ins, out: [
        _unbroadcast(g / ins[1], ins[0].shape),
        _unbroadcast(-g * ins[0] / (ins[1] * ins[1]), ins[1].shape)],
    "matmul": _bw_matmul,
    "neg": lambda at, g, ins, out: [-g],
    "relu": lambda at, g, ins, out: [g * (ins[0] > 0.0)],
    "sigmoid": lambda at, g, ins, out: [g * out * (1.0 - out)],
    "log": lambda at, g, ins, out: [g / ins[0]],
    "exp": lambda at, g, ins, out: [g * out],
    "power": _bw_power,
    "clip": lambda at, g, ins, out: [
        g * ((ins[0] >= at["lo"]) & (ins[0] <= at["hi"]))],
    "softmax": _bw_softmax,
    "sum": _bw_sum,
    "reshape": lambda at, g, ins, out: [g.reshape(at["in_shape"])],
    "transpose": lambda at, g, ins, out: [
        np.transpose(g, np.argsort(at["axes"]))],
    "broadcast": lambda at, g, ins, out: [_unbroadcast(g, at["in_shape"])],
    "concat": _bw_concat,
    "take": _bw_take,
    "cosine": _bw_cosine,
}
