"""Small reverse-mode autodiff over dense float64 arrays.

Values are plain numpy arrays. Every primitive returns a :class:`Node` that
records its parents and a closure computing vector-Jacobian products, so a
scalar loss can be differentiated with respect to the leaves created by
:func:`param`. Broadcasting is deliberately narrow: scalar scaling and a
row-wise bias add; every other binary op needs identical shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(ValueError):
    pass


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp", "name")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def const(x) -> Node:
    """Leaf that never receives a gradient."""
    if isinstance(x, Node):
        return x
    return Node(_as_array(x), op="const")


def param(x, name: str | None = None) -> Node:
    """Trainable leaf. The array is copied so later updates never alias the graph."""
    return Node(np.array(x, dtype=np.float64, copy=True), op="param", requires_grad=True, name=name)


def _node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, op, parents, vjp) -> Node:
    return Node(value, op=op, parents=parents, vjp=vjp)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape == b.shape:
        return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.shape == a.shape[1:]:
        # row-wise bias
        return _make(a.value + b.value, "add", (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul_elem(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise ShapeError("mul_elem", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av * bv, "mul_elem", (a, b), lambda g: (g * bv, g * av))


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Node:
    a = _node(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def scale(a, c: float) -> Node:
    a = _node(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def tanh(a) -> Node:
    a = _node(a)
    y = np.tanh(a.value)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Node:
    a = _node(a)
    y = np.exp(a.value)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Node:
    a = _node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log: non-positive input (min={a.value.min()!r})")
    av = a.value
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def sum(a, axis: int | None = None) -> Node:  # noqa: A001
    a = _node(a)
    shape = a.shape
    if axis is None:
        return _make(np.sum(a.value), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    if not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape)
    return _make(
        np.sum(a.value, axis=axis),
        "sum",
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def l2_normalize(a, axis: int = -1) -> Node:
    a = _node(a)
    norm = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DomainError("l2_normalize: all-zero row")
    y = a.value / norm

    def vjp(g):
        return ((g - y * np.sum(y * g, axis=axis, keepdims=True)) / norm,)

    return _make(y, "l2_normalize", (a,), vjp)


def dot_rows(a, b) -> Node:
    """Inner product along the last axis: [N, D] x [N, D] -> [N]."""
    a, b = _node(a), _node(b)
    if a.shape != b.shape or a.value.ndim == 0:
        raise ShapeError("dot_rows", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        ge = np.expand_dims(g, -1)
        return ge * bv, ge * av

    return _make(np.sum(av * bv, axis=-1), "dot_rows", (a, b), vjp)


def softmax(a, axis: int = -1) -> Node:
    a = _node(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(s * g, axis=axis, keepdims=True)),)

    return _make(s, "softmax", (a,), vjp)


def log_softmax(a, axis: int = -1) -> Node:
    """Stable log(softmax(a)); avoids the log domain check on underflowed probabilities."""
    a = _node(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def vjp(g):
        return (g - s * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (a,), vjp)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat")
    ref = nodes[0].shape
    nd = len(ref)
    ax = axis % nd if nd else 0
    for n in nodes[1:]:
        s = n.shape
        if len(s) != nd or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, s)
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([n.value for n in nodes], axis=ax), "concat", nodes, vjp)


def slice(a, start: int, stop: int, axis: int = 0) -> Node:  # noqa: A001
    a = _node(a)
    shape = a.shape
    ax = axis % len(shape)
    if not 0 <= start <= stop <= shape[ax]:
        raise ShapeError("slice", shape, (start, stop))
    index = [np.s_[:]] * len(shape)
    index[ax] = np.s_[start:stop]
    index = tuple(index)

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.value[index].copy(), "slice", (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Node:
    a = _node(a)
    old = a.shape
    try:
        y = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(old),))


def roll(a, shifts: Sequence[int], axes: Sequence[int]) -> Node:
    a = _node(a)
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.value, shifts, axes), "roll", (a,), lambda g: (np.roll(g, back, axes),))


def masked_add(base, delta, mask) -> Node:
    """base + mask * delta, with base either delta-shaped or a batch of delta-shaped rows."""
    base, delta = _node(base), _node(delta)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != delta.shape:
        raise ShapeError("masked_add", delta.shape, m.shape)
    md = m * delta.value
    if base.shape == delta.shape:
        return _make(base.value + md, "masked_add", (base, delta), lambda g: (g, g * m))
    if base.shape[1:] == delta.shape:
        return _make(base.value + md, "masked_add", (base, delta), lambda g: (g, g.sum(axis=0) * m))
    raise ShapeError("masked_add", base.shape, delta.shape)


# ------------------------------------------------------------------ backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every reachable param leaf."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones(root.shape)
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._vjp is None:
            if node.op == "param":
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise ShapeError(f"backward through {node.op}", parent.shape, pg.shape)
            parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    return leaves


def fd_gradient(scalar_fn: Callable[[list[np.ndarray]], float], params: Sequence, h: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of ``scalar_fn`` at ``params`` (one array per param)."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = []
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(scalar_fn(base))
            flat[i] = orig - h
            fm = float(scalar_fn(base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
