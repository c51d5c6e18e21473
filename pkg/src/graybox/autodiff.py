"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation builds a :class:`Node` whose value is computed eagerly; the
backward pass walks the recorded graph once in reverse topological order.
Only scalar-tensor broadcasting is implicit. Anything else must go through
:func:`broadcast_to`, :func:`reshape` or :func:`transpose`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class GraphError(Exception):
    """Raised for malformed graphs. ``op`` names the offending node."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class Node:
    __slots__ = ("value", "parents", "op", "name", "requires_grad", "_backward", "inputs")

    def __init__(self, value, parents=(), op="leaf", backward=None, name=None, requires_grad=False):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self._backward = backward
        self.inputs = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise GraphError("divide", "only division by a python scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def var(name: str, value) -> Node:
    """Differentiable leaf."""
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def const(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=False)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _node(op, value, parents, backward):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, "non-finite value produced")
    rg = any(p.requires_grad for p in parents)
    return Node(value, parents, op, backward if rg else None, requires_grad=rg)


def _check_same(op, a: Node, b: Node):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} differ (only scalar broadcasting is implicit)")


def _unscalar(g, shape):
    # reduce a gradient back onto a scalar operand
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_same("add", a, b)

    def backward(g):
        return _unscalar(g, a.shape), _unscalar(g, b.shape)

    return _node("add", a.value + b.value, (a, b), backward)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_same("sub", a, b)

    def backward(g):
        return _unscalar(g, a.shape), _unscalar(-g, b.shape)

    return _node("sub", a.value - b.value, (a, b), backward)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_same("multiply", a, b)

    def backward(g):
        return _unscalar(g * b.value, a.shape), _unscalar(g * a.value, b.shape)

    return _node("multiply", a.value * b.value, (a, b), backward)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _node("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Node) -> Node:
    s = _sigmoid(x.value)
    return _node("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return _node("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node("softmax", s, (x,), backward)


def bce_with_logits(logits: Node, labels) -> Node:
    """Elementwise sigmoid binary cross-entropy; ``labels`` are constants."""
    y = np.asarray(labels.value if isinstance(labels, Node) else labels, dtype=np.float64)
    z = logits.value
    if y.shape != z.shape:
        raise ShapeError("bce", f"logits {z.shape} vs labels {y.shape}")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _node("bce", loss, (logits,), lambda g: (g * (_sigmoid(z) - y),))


# ---------------------------------------------------------------- reductions

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Node, axis=None) -> Node:
    axes = _axes(axis, x.value.ndim)
    out = x.value.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _node("sum", out, (x,), backward)


def mean(x: Node, axis=None) -> Node:
    """Mean-pool over ``axis`` (all axes when None)."""
    axes = _axes(axis, x.value.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.value.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return _node("mean_pool", out, (x,), backward)


def l2norm(x: Node, axis=None) -> Node:
    """Euclidean norm over ``axis``; the subgradient at zero is taken as zero."""
    axes = _axes(axis, x.value.ndim)
    n = np.sqrt((x.value * x.value).sum(axis=axes))

    def backward(g):
        nk = np.expand_dims(n, axes)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, x.value / safe, 0.0) * np.expand_dims(g, axes),)

    return _node("l2norm", n, (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    """``a @ b``. ``b`` may be 2-D (shared across the leading axes of ``a``)
    or share ``a``'s batch axes exactly."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.value.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        if shared:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.value, -1, -2) @ g
        return ga, gb

    return _node("matmul", out, (a, b), backward)


def unfold(x: Node, kh: int, kw: int, stride: int = 1, pad=0) -> Node:
    """Patch extraction for NHWC input -> (N, Ho, Wo, kh*kw*C).

    ``pad`` is an int or a (rows, cols) pair of zero-padding widths.
    """
    if x.value.ndim != 4:
        raise ShapeError("unfold", f"expected NHWC input, got {x.shape}")
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    n, h, w, c = x.shape
    xp = np.pad(x.value, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.value
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("unfold", f"kernel {kh}x{kw} larger than padded input {x.shape}")
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]

    def backward(g):
        g = g.reshape(n, ho, wo, kh, kw, c)
        gp = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
        for i in range(kh):
            for j in range(kw):
                gp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g[:, :, :, i, j, :]
        return (gp[:, ph:ph + h, pw:pw + w, :],)

    return _node("conv_unfold", cols.reshape(n, ho, wo, kh * kw * c), (x,), backward)


def conv2d(x: Node, weight: Node, stride: int = 1, pad=0) -> Node:
    """NHWC convolution with an (kh, kw, C, F) kernel via unfold + matmul."""
    kh, kw, c, f = weight.shape
    if x.value.ndim != 4 or x.shape[-1] != c:
        raise ShapeError("conv2d", f"input {x.shape} incompatible with kernel {weight.shape}")
    cols = unfold(x, kh, kw, stride, pad)
    return matmul(cols, reshape(weight, (kh * kw * c, f)))


# ---------------------------------------------------------------- structural

def reshape(x: Node, shape) -> Node:
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Node, axes) -> Node:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Node, shape) -> Node:
    """Explicit broadcast; gradients are summed over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError as exc:
        raise ShapeError("broadcast", str(exc)) from None
    lead = len(shape) - x.value.ndim
    expanded = tuple(i for i in range(len(shape))
                     if i < lead or x.shape[i - lead] == 1 and shape[i] != 1)

    def backward(g):
        return (g.sum(axis=expanded).reshape(x.shape),)

    return _node("broadcast", out, (x,), backward)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [_lift(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("concatenate", str(exc)) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(nodes)))

    return _node("concatenate", out, nodes, backward)


def slice_(x: Node, idx) -> Node:
    """Basic (view) indexing only: ints and slices."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for part in idx:
        if not isinstance(part, (int, slice, type(Ellipsis))):
            raise GraphError("slice", "only ints, slices and Ellipsis are supported")
    out = x.value[idx].copy()

    def backward(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _node("slice", out, (x,), backward)


def embedding(table: Node, indices) -> Node:
    """Row lookup ``table[indices]`` for an integer index array."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise GraphError("embedding", "indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", f"index out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node("embedding", table.value[idx], (table,), backward)


def gather_rows(x: Node, indices) -> Node:
    """Per-batch row selection: x (B, N, D), indices (B, R) -> (B, R, D)."""
    idx = np.asarray(indices)
    if x.value.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("gather", f"x {x.shape} with indices {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _node("gather", x.value[rows, idx], (x,), backward)


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backprop(root: Node, targets: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to every node in ``targets``."""
    targets = list(targets)
    if root.size != 1:
        raise GraphError(root.op, f"gradient needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(t), np.zeros(t.shape)) for t in targets]


# ---------------------------------------------------------------- graph API

Graph = Callable[..., Node]


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Node:
    """Run ``graph`` on named differentiable inputs and return its root.

    ``graph`` is called with one keyword argument per binding; every value
    along the way is cached on its node for a later :func:`gradient`.
    """
    leaves = {name: var(name, value) for name, value in bindings.items()}
    try:
        root = graph(**leaves)
    except TypeError as exc:
        raise GraphError("evaluate", f"unbound or unexpected input: {exc}") from None
    root = _lift(root)
    if not np.all(np.isfinite(root.value)):
        raise NonFiniteError(root.op, "non-finite graph output")
    root.inputs = leaves
    return root


def gradient(root: Node, with_respect_to: str) -> np.ndarray:
    if root.inputs is None or with_respect_to not in root.inputs:
        raise GraphError("gradient", f"unbound name {with_respect_to!r}")
    (g,) = backprop(root, [root.inputs[with_respect_to]])
    return g


def finite_diff_check(graph: Graph, bindings: Mapping[str, np.ndarray], target: str,
                      h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The denominator is floored at ``1e-4`` so entries that are exactly zero
    analytically (dead relus, clipped branches) do not divide rounding noise
    by nothing.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    bindings = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    analytic = gradient(evaluate(graph, bindings), target)
    x = bindings[target]
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(evaluate(graph, bindings).value)
        flat[i] = orig - h
        down = float(evaluate(graph, bindings).value)
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / scale))
