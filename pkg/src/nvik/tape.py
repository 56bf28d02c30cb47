"""Reverse-mode differentiation over dense numpy arrays of rank <= 2.

Values are float64 numpy arrays (scalars are 0-d). A Node records the
operation that produced it; calling :func:`backward` on a scalar root
accumulates gradients into every reachable node with ``requires_grad``.
Gradient accumulation is additive, so parameters can collect contributions
from several backward passes before an optimizer step.

Everything that needs to stay in log space (densities, weights) is computed
in log space; there are no probability-space ops here.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, expit, gammaln as _gammaln_np

__all__ = [
    "Node", "ShapeError", "ParameterStore", "constant", "parameter",
    "detach", "backward", "add", "sub", "mul", "div", "neg", "scale",
    "matmul", "tanh", "exp", "log", "softplus", "softmax", "logsumexp",
    "gaussian_logpdf", "gammaln", "nsum", "cumsum", "concat", "reshape",
    "take", "take_rows", "as_node",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when an op receives arrays of incompatible shapes."""


class Node:
    """A value in the computation graph.

    ``parents`` and the vector-Jacobian product closure are only retained
    when the node requires grad, so pure-inference passes pay no graph
    cost beyond the wrapper itself.
    """

    __slots__ = ("value", "grad", "parents", "_vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        req = requires_grad or any(p.requires_grad for p in parents)
        self.requires_grad = req
        self.parents = tuple(parents) if req else ()
        self._vjp = vjp if req else None
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def constant(x):
    return Node(x)


def parameter(x):
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def detach(n):
    """Same value, no history. Downstream roots send no gradient upstream."""
    n = as_node(n)
    return Node(n.value)


def _toposort(root):
    """Deterministic post-order over the requires_grad subgraph."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        # reversed so parents are visited in declaration order
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into .grad of every reachable node."""
    root = as_node(root)
    if root.value.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    adjoint = {id(root): np.ones(())}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad = node.grad + g
        if node._vjp is None:
            continue
        for p, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}")


def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    return Node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.value.shape),
                           _unbroadcast(g * a.value, b.value.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * out / b.value, b.value.shape))

    return Node(out, (a, b), vjp)


def neg(a):
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a plain python/numpy constant."""
    a = as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g):
        g = np.asarray(g)
        if av.ndim == 1 and bv.ndim == 1:  # dot -> scalar
            return (g * bv, g * av)
        if av.ndim == 1:  # (D,) @ (D,H) -> (H,)
            return (g @ bv.T, np.outer(av, g))
        if bv.ndim == 1:  # (S,D) @ (D,) -> (S,)
            return (np.outer(g, bv), av.T @ g)
        return (g @ bv.T, av.T @ g)

    return Node(out, (a, b), vjp)


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def softplus(a):
    a = as_node(a)
    return Node(_softplus_np(a.value), (a,), lambda g: (g * expit(a.value),))


def gammaln(a):
    a = as_node(a)
    return Node(_gammaln_np(a.value), (a,), lambda g: (g * digamma(a.value),))


def softmax(a, axis=-1):
    a = as_node(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return Node(out, (a,), vjp)


def logsumexp(a, axis=None):
    a = as_node(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis) if axis is not None else (m + np.log(s)).reshape(())
    soft = e / s

    def vjp(g):
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return Node(out, (a,), vjp)


def nsum(a, axis=None):
    """Sum (named nsum to avoid shadowing the builtin in client code)."""
    a = as_node(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return Node(out, (a,), vjp)


def cumsum(a, axis=-1, reverse=False):
    a = as_node(a)
    x = a.value
    if reverse:
        out = np.flip(np.cumsum(np.flip(x, axis=axis), axis=axis), axis=axis)

        def vjp(g):
            return (np.cumsum(g, axis=axis),)
    else:
        out = np.cumsum(x, axis=axis)

        def vjp(g):
            return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Node(out, (a,), vjp)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(out, tuple(nodes), vjp)


def reshape(a, shape):
    a = as_node(a)
    orig = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def take(a, indices, axis=0):
    """Gather along an axis; scalar index yields a reduced-rank result."""
    a = as_node(a)
    out = np.take(a.value, indices, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.value)
        idx = np.atleast_1d(indices)
        gg = np.expand_dims(g, axis) if np.isscalar(indices) else np.asarray(g)
        if axis == 0:
            np.add.at(ga, idx, gg)
        else:
            np.add.at(ga.swapaxes(0, axis), idx, gg.swapaxes(0, axis))
        return (ga,)

    return Node(out, (a,), vjp)


def take_rows(a, indices):
    return take(a, np.asarray(indices, dtype=np.intp), axis=0)


def gaussian_logpdf(x, mean, std):
    """Fused diagonal-Gaussian log density.

    Rank-2 inputs are (S, D) batches and yield (S,); rank-1 inputs are a
    single D-vector and yield a scalar. ``mean`` and ``std`` broadcast
    against ``x``.
    """
    x, mean, std = as_node(x), as_node(mean), as_node(std)
    xv, mv, sv = x.value, mean.value, std.value
    try:
        np.broadcast_shapes(xv.shape, mv.shape, np.shape(sv))
    except ValueError:
        raise ShapeError(
            f"gaussian_logpdf: incompatible shapes x{xv.shape} mean{mv.shape} std{np.shape(sv)}")
    if xv.ndim == 0:
        d_axis = None
        dim = 1
    else:
        d_axis = xv.ndim - 1
        dim = xv.shape[-1]
    z = (xv - mv) / sv
    log_s = np.broadcast_to(np.log(sv), xv.shape)
    per = -0.5 * z * z - np.log(sv) - 0.5 * LOG_2PI
    per = np.broadcast_to(per, xv.shape)
    out = per.sum(axis=d_axis) if d_axis is not None else per.reshape(())
    del log_s, dim

    def vjp(g):
        gg = np.expand_dims(g, d_axis) if d_axis is not None else g
        dx = -z / sv * gg
        dm = -dx
        ds = (-1.0 / sv + z * z / sv) * gg
        return (_unbroadcast(dx, xv.shape),
                _unbroadcast(dm, mv.shape),
                _unbroadcast(ds, np.shape(sv)))

    return Node(out, (x, mean, std), vjp)


class ParameterStore:
    """Named groups of trainable leaf nodes.

    Group labels follow the scheme ``target:k``, ``forward_kernel:k``,
    ``reverse_kernel:k``, ``schedule``, ``heuristic``, ``proposal``.
    Every trainable node belongs to exactly one group.
    """

    def __init__(self):
        self._groups = {}
        self._ids = set()

    def add(self, label, value):
        node = value if isinstance(value, Node) else parameter(value)
        if not node.requires_grad:
            raise ValueError("only trainable nodes can be registered")
        if id(node) in self._ids:
            raise ValueError("node already registered in another group")
        self._ids.add(id(node))
        self._groups.setdefault(label, []).append(node)
        return node

    def group(self, label):
        return list(self._groups.get(label, []))

    def labels(self):
        return list(self._groups.keys())

    def all_parameters(self):
        return [n for label in self._groups for n in self._groups[label]]

    def zero_grads(self):
        for n in self.all_parameters():
            n.grad = None

    def state_arrays(self):
        """Flat checkpointable mapping of label/index -> value copy."""
        out = {}
        for label, nodes in self._groups.items():
            for i, n in enumerate(nodes):
                out[f"{label}|{i}"] = n.value.copy()
        return out

    def load_state_arrays(self, arrays):
        for label, nodes in self._groups.items():
            for i, n in enumerate(nodes):
                key = f"{label}|{i}"
                if key not in arrays:
                    raise KeyError(f"checkpoint missing parameter {key}")
                val = np.asarray(arrays[key], dtype=np.float64)
                if val.shape != n.value.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {key}")
                n.value = val.copy()

    def grad_snapshot(self):
        """Copy current gradients per group (zeros where untouched)."""
        out = {}
        for label, nodes in self._groups.items():
            out[label] = [np.zeros_like(n.value) if n.grad is None else n.grad.copy()
                          for n in nodes]
        return out
