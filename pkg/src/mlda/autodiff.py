"""Eager reverse-mode automatic differentiation over float64 numpy arrays.

Every operation computes its value immediately and appends a record to the
owning :class:`Graph`. :func:`backward` walks the records in reverse. With
``create_graph=True`` the backward pass is itself built from recorded
operations, so its results can be differentiated again (needed for the
gradient penalty of a Wasserstein critic).

Only a subset of operations know how to record their own backward pass; see
``DOUBLE_BACKPROP_OPS``. The second derivative of ReLU is taken to be zero
everywhere, including at the kink.
"""
from __future__ import annotations

from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "UnsupportedOpError",
    "Graph",
    "Node",
    "GradientMap",
    "backward",
    "check_gradient",
    "OPS",
    "DOUBLE_BACKPROP_OPS",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ArithmeticError):
    pass


class UnsupportedOpError(AutodiffError):
    pass


# Public operation set. Internal helpers (transpose, reshape, ...) also
# record nodes but are not part of the user-facing contract.
OPS = frozenset({
    "matmul", "conv1x1", "conv3x3-valid", "add", "mul-by-scalar", "relu",
    "batchnorm", "global-avg-pool", "concat", "sum", "mean", "l2-norm",
    "softmax-cross-entropy", "square", "subtract",
})

DOUBLE_BACKPROP_OPS = frozenset({
    "matmul", "conv1x1", "relu", "add", "mul-by-scalar", "l2-norm", "square",
    "subtract", "sum", "mean",
    # internal helpers used by the rules above
    "transpose", "reshape", "broadcast", "sum-to", "mul", "div", "grl",
    "global-avg-pool",
})


class Node:
    """One recorded value. ``id`` is -1 for values computed off the tape."""

    __slots__ = ("graph", "id", "op", "inputs", "value", "rule", "trainable",
                 "differentiable", "extra")

    def __init__(self, graph: Graph, op: str, inputs: tuple, value: np.ndarray,
                 rule: Callable | None = None):
        self.graph = graph
        self.id = -1
        self.op = op
        self.inputs = inputs
        self.value = value
        self.rule = rule
        self.trainable = False
        self.differentiable = op == "leaf"
        self.extra: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(_lift(self.graph, other), self)

    def __sub__(self, other):
        return subtract(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return subtract(_lift(self.graph, other), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(graph: Graph, x) -> Node:
    return x if isinstance(x, Node) else graph.constant(x)


class Graph:
    """Append-only tape. Node inputs always precede the node."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True
        self._params: dict[int, Node] = {}

    def _emit(self, op: str, inputs: tuple, value, rule=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{op}: produced non-finite values")
        if not self.recording:
            return Node(self, op, (), value)
        node = Node(self, op, inputs, value, rule)
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, trainable: bool = False) -> Node:
        """Differentiable input. Gradients are reported for every leaf."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError("leaf: non-finite input")
        node = Node(self, "leaf", (), value)
        node.trainable = trainable
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        node = self._emit("const", (), value)
        node.differentiable = False
        return node

    def param(self, parameter) -> Node:
        """Leaf bound to a parameter object with a ``value`` array.

        Repeated calls within one graph return the same leaf.
        """
        key = id(parameter)
        node = self._params.get(key)
        if node is None:
            node = self.leaf(parameter.value, trainable=True)
            self._params[key] = node
        return node

    def param_node(self, parameter) -> Node | None:
        return self._params.get(id(parameter))


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- linear algebra ---------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape[1]} vs {b.shape[0]}")

    def rule(g, out):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return a.graph._emit("matmul", (a, b), a.value @ b.value, rule)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D operand, got {a.shape}")
    return a.graph._emit("transpose", (a,), a.value.T.copy(),
                         lambda g, out: (transpose(g),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return a.graph._emit("reshape", (a,), value,
                         lambda g, out: (reshape(g, a.shape),))


def broadcast(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return a.graph._emit("broadcast", (a,), value,
                         lambda g, out: (sum_to(g, a.shape),))


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def sum_to(a: Node, shape: Sequence[int]) -> Node:
    """Sum ``a`` down to a shape it was broadcast from."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return a.graph._emit("sum-to", (a,), _sum_to_array(a.value, shape),
                         lambda g, out: (broadcast(g, a.shape),))


def conv1x1(x: Node, w: Node) -> Node:
    """1x1 convolution over the trailing channel axis; ``w`` is (C_in, C_out)."""
    if w.value.ndim != 2 or x.value.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1x1: input channels {x.shape} do not match kernel {w.shape}")

    def rule(g, out):
        c_in, c_out = w.shape
        flat_x = reshape(x, (-1, c_in))
        flat_g = reshape(g, (-1, c_out))
        return conv1x1(g, transpose(w)), matmul(transpose(flat_x), flat_g)

    return x.graph._emit("conv1x1", (x, w), x.value @ w.value, rule)


def conv3x3(x: Node, w: Node) -> Node:
    """Valid (unpadded, stride 1) 3x3 convolution. ``x`` is (m, H, W, C), ``w`` (3, 3, C, K)."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv3x3-valid: expected (m, H, W, C) input, got {x.shape}")
    if w.value.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv3x3-valid: kernel {w.shape} does not fit input {x.shape}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise ShapeError(f"conv3x3-valid: spatial extent {x.shape[1:3]} smaller than 3x3")
    patches = np.lib.stride_tricks.sliding_window_view(x.value, (3, 3), axis=(1, 2))
    # patches: (m, H-2, W-2, C, 3, 3)
    value = np.einsum("mhwcij,ijck->mhwk", patches, w.value)

    def rule(g, out):
        gv = g.value
        dw = np.einsum("mhwcij,mhwk->ijck", patches, gv)
        padded = np.pad(gv, ((0, 0), (2, 2), (2, 2), (0, 0)))
        gp = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        dx = np.einsum("mhwkij,ijck->mhwc", gp, w.value[::-1, ::-1])
        return dx, dw

    return x.graph._emit("conv3x3-valid", (x, w), value, rule)


# --- elementwise ------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)

    def rule(g, out):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return a.graph._emit("add", (a, b), a.value + b.value, rule)


def subtract(a: Node, b: Node) -> Node:
    _broadcast_shape("subtract", a, b)

    def rule(g, out):
        return sum_to(g, a.shape), scale(sum_to(g, b.shape), -1.0)

    return a.graph._emit("subtract", (a, b), a.value - b.value, rule)


def scale(a: Node, factor) -> Node:
    """Multiply by a constant scalar or constant array (broadcast onto ``a``)."""
    factor = np.asarray(factor, dtype=np.float64)
    if np.broadcast_shapes(a.shape, factor.shape) != a.shape:
        raise ShapeError(f"mul-by-scalar: factor shape {factor.shape} does not fit {a.shape}")
    return a.graph._emit("mul-by-scalar", (a,), a.value * factor,
                         lambda g, out: (scale(g, factor),))


def mul(a: Node, b: Node) -> Node:
    _check_same("mul", a, b)
    return a.graph._emit("mul", (a, b), a.value * b.value,
                         lambda g, out: (mul(g, b), mul(g, a)))


def div(a: Node, b: Node) -> Node:
    _check_same("div", a, b)
    if np.any(b.value == 0):
        raise NumericError("div: division by zero")

    def rule(g, out):
        ga = div(g, b)
        return ga, scale(mul(ga, out), -1.0)

    return a.graph._emit("div", (a, b), a.value / b.value, rule)


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return a.graph._emit("relu", (a,), np.where(mask > 0, a.value, 0.0),
                         lambda g, out: (scale(g, mask),))


def square(a: Node) -> Node:
    return a.graph._emit("square", (a,), a.value * a.value,
                         lambda g, out: (mul(g, scale(a, 2.0)),))


def grl(a: Node, scale_by: float = 1.0) -> Node:
    """Gradient reversal: identity forward, gradient times ``-scale_by`` backward."""
    return a.graph._emit("grl", (a,), a.value.copy(),
                         lambda g, out: (scale(g, -scale_by),))


# --- reductions -------------------------------------------------------------

def _reduced_shape(a: Node, axis) -> tuple[tuple[int, ...], tuple[int, ...], int]:
    """Return (output shape, keepdims shape, element count per output)."""
    if axis is None:
        return (1,), (1,) * a.value.ndim, a.value.size
    ax = axis % a.value.ndim
    keep = tuple(1 if i == ax else n for i, n in enumerate(a.shape))
    out = tuple(n for i, n in enumerate(a.shape) if i != ax)
    return out, keep, a.shape[ax]


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    out_shape, keep, _ = _reduced_shape(a, axis)
    value = a.value.sum(axis=axis).reshape(out_shape)

    def rule(g, out):
        return (broadcast(reshape(g, keep), a.shape),)

    return a.graph._emit("sum", (a,), value, rule)


def mean(a: Node, axis: int | None = None) -> Node:
    out_shape, keep, count = _reduced_shape(a, axis)
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    value = a.value.mean(axis=axis).reshape(out_shape)

    def rule(g, out):
        return (scale(broadcast(reshape(g, keep), a.shape), 1.0 / count),)

    return a.graph._emit("mean", (a,), value, rule)


def l2_norm(a: Node, axis: int = -1) -> Node:
    """Euclidean norm along ``axis`` (the axis is removed)."""
    _, keep, _ = _reduced_shape(a, axis)
    value = np.sqrt((a.value * a.value).sum(axis=axis))

    zero = (value == 0).astype(np.float64)

    def rule(g, out):
        # zero subgradient where the norm vanishes
        safe = add(out, out.graph.constant(zero)) if zero.any() else out
        ratio = div(g, safe)
        if zero.any():
            ratio = scale(ratio, 1.0 - zero)
        return (mul(a, broadcast(reshape(ratio, keep), a.shape)),)

    return a.graph._emit("l2-norm", (a,), value, rule)


def global_avg_pool(x: Node) -> Node:
    """Mean over spatial positions: (H, W, C) -> (C,), (m, H, W, C) -> (m, C)."""
    if x.value.ndim not in (3, 4):
        raise ShapeError(f"global-avg-pool: expected rank 3 or 4 input, got shape {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    value = x.value.mean(axis=(-3, -2))

    def rule(g, out):
        keep = g.shape[:-1] + (1, 1, g.shape[-1])
        return (scale(broadcast(reshape(g, keep), x.shape), 1.0 / (h * w)),)

    return x.graph._emit("global-avg-pool", (x,), value, rule)


# --- structural -------------------------------------------------------------

def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ShapeError("concat: no inputs")
    ref = nodes[0]
    ax = axis % ref.value.ndim
    for n in nodes[1:]:
        if n.value.ndim != ref.value.ndim or any(
                i != ax and p != q for i, (p, q) in enumerate(zip(n.shape, ref.shape))):
            raise ShapeError(f"concat: shape {n.shape} incompatible with {ref.shape} on axis {ax}")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def rule(g, out):
        return tuple(np.take(g.value, np.arange(lo, hi), axis=ax)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    value = np.concatenate([n.value for n in nodes], axis=ax)
    return ref.graph._emit("concat", tuple(nodes), value, rule)


def take_rows(a: Node, start: int, stop: int) -> Node:
    """Rows ``start:stop`` along the leading axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"take-rows: range {start}:{stop} outside leading extent {a.shape[0]}")

    def rule(g, out):
        full = np.zeros(a.shape)
        full[start:stop] = g.value
        return (full,)

    return a.graph._emit("take-rows", (a,), a.value[start:stop].copy(), rule)


# --- layers with closed-form backward --------------------------------------

def batchnorm(x: Node, gamma: Node, beta: Node, *, training: bool = True,
              running_mean=None, running_var=None, eps: float = 1e-5) -> Node:
    """Normalise over every axis but the last (channels).

    In training mode batch statistics are used and stored on ``node.extra`` as
    ``(mean, var)`` so the caller can update running averages.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = tuple(range(x.value.ndim - 1))
    if training:
        count = int(np.prod([x.shape[i] for i in axes]))
        if count < 2:
            raise ShapeError(f"batchnorm: need more than one value per channel, got shape {x.shape}")
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
    else:
        mu = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    value = xhat * gamma.value + beta.value

    def rule(g, out):
        gv = g.value
        dgamma = (gv * xhat).sum(axis=axes)
        dbeta = gv.sum(axis=axes)
        dxhat = gv * gamma.value
        if training:
            dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    node = x.graph._emit("batchnorm", (x, gamma, beta), value, rule)
    node.extra = (mu, var)
    return node


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Per-sample ``-log softmax(logits)[label]`` for (m, N) logits; returns shape (m,)."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise ShapeError(f"softmax-cross-entropy: expected (m, N) logits, got {logits.shape}")
    m, n = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"softmax-cross-entropy: {labels.shape[0] if labels.ndim else 0} labels for {m} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax-cross-entropy: labels must be integer class indices")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"softmax-cross-entropy: label outside [0, {n})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    value = logz - shifted[rows, labels]

    def rule(g, out):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * g.value[:, None],)

    return logits.graph._emit("softmax-cross-entropy", (logits,), value, rule)


# --- backward ---------------------------------------------------------------

class GradientMap(dict):
    """Leaf node id -> gradient (ndarray, or Node when the pass was recorded)."""

    def of(self, node: Node):
        try:
            return self[node.id]
        except KeyError:
            return np.zeros(node.shape)

    def for_param(self, graph: Graph, parameter):
        node = graph.param_node(parameter)
        if node is None or node.id not in self:
            return np.zeros(np.shape(parameter.value))
        return self[node.id]


def backward(graph: Graph, output: Node, wrt: Sequence[Node] | None = None,
             create_graph: bool = False) -> GradientMap:
    """Reverse accumulation of d(output)/d(leaf).

    With ``wrt`` only nodes lying on a path from one of ``wrt`` to ``output``
    are visited and the map holds entries for ``wrt`` alone. With
    ``create_graph`` the gradients are recorded Nodes.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
    if output.graph is not graph or output.id < 0:
        raise AutodiffError("backward: output is not recorded on this graph")

    nodes = graph.nodes
    top = output.id
    needed = np.zeros(top + 1, dtype=bool)
    needed[top] = True
    for i in range(top, -1, -1):
        if needed[i]:
            for inp in nodes[i].inputs:
                needed[inp.id] = True
    wrt_ids = {n.id for n in wrt} if wrt is not None else set()
    if wrt is not None:
        reaches = np.zeros(top + 1, dtype=bool)
        for i in range(top + 1):
            n = nodes[i]
            reaches[i] = i in wrt_ids or any(reaches[inp.id] for inp in n.inputs)
        needed &= reaches

    captured: dict[int, Node] = {}
    was_recording = graph.recording
    graph.recording = create_graph
    try:
        grads: dict[int, Node] = {top: graph.constant(np.ones(output.shape))}
        for i in range(top, -1, -1):
            if not needed[i] or i not in grads:
                continue
            node = nodes[i]
            if i in wrt_ids:
                captured[i] = grads[i]
            if node.rule is None:
                continue
            if create_graph and node.op not in DOUBLE_BACKPROP_OPS:
                raise UnsupportedOpError(
                    f"backward: op {node.op!r} cannot be differentiated twice")
            g = grads.pop(i)
            for inp, gi in zip(node.inputs, node.rule(g, node)):
                if gi is None or not needed[inp.id] or inp.op == "const":
                    continue
                if not isinstance(gi, Node):
                    gi = graph.constant(gi)
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else add(prev, gi)
    finally:
        graph.recording = was_recording

    if wrt is None:
        captured = {i: g for i, g in grads.items()
                    if nodes[i].op == "leaf" and nodes[i].differentiable}
    result = GradientMap()
    for i, g in captured.items():
        result[i] = g if create_graph else g.value
    return result


def check_gradient(f: Callable[..., Node], x, eps: float = 1e-5,
                   max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``f(graph, *leaves)`` builds a scalar. ``x`` is one array or a sequence of
    arrays (one leaf each). Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``max_coords`` limits the
    check to a seeded random sample of coordinates.
    """
    if eps <= 0:
        raise ValueError("check_gradient: eps must be positive")
    arrays = [np.array(x, dtype=np.float64)] if isinstance(x, np.ndarray) or np.isscalar(x) \
        else [np.array(a, dtype=np.float64) for a in x]

    def evaluate(values):
        g = Graph()
        leaves = [g.leaf(v) for v in values]
        return g, leaves, f(g, *leaves)

    try:
        g, leaves, out = evaluate(arrays)
        grads = backward(g, out, wrt=leaves)
        analytic = [np.asarray(grads.of(leaf)) for leaf in leaves]
    except (NumericError, FloatingPointError):
        return float("inf")

    coords = [(k, idx) for k, base in enumerate(arrays) for idx in np.ndindex(base.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    worst = 0.0
    for k, idx in coords:
        vals = []
        for sign in (1.0, -1.0):
            shifted = [a.copy() for a in arrays]
            shifted[k][idx] += sign * eps
            try:
                vals.append(float(evaluate(shifted)[2].value.reshape(())))
            except (NumericError, FloatingPointError):
                return float("inf")
        numeric = (vals[0] - vals[1]) / (2 * eps)
        a = float(analytic[k][idx])
        err = abs(a - numeric) / max(1.0, abs(a))
        if not np.isfinite(err):
            return float("inf")
        worst = max(worst, err)
    return worst
