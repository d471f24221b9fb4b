"""Reverse-mode automatic differentiation over a dynamically built graph.

Values are 64-bit numpy arrays.  Every operation appends a node to an
acyclic graph that is rebuilt from scratch for each evaluation (there is no
compilation or caching), and :func:`backward` runs one reverse pass that
visits each node exactly once in reverse topological order.

Conventions:

* scalars have shape ``()``; a batch dimension, when present, is axis 0;
  reductions such as :func:`softmax` and :func:`logsumexp` act along the
  last axis,
* any non-finite value produced by an operation (forward or backward)
  raises :class:`NonFiniteError` rather than propagating silently,
* node values are treated as immutable once the op completes; nothing in
  this module writes to a value array in place, so graphs may be read from
  several threads while construction stays confined to one.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Node",
    "constant",
    "param",
    "as_node",
    "add",
    "sub",
    "mul",
    "affine",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "logsumexp",
    "reduce_sum",
    "concat",
    "slice_",
    "reshape",
    "clip",
    "backward",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a node value or adjoint."""


def _require_finite(value: np.ndarray, where: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value in '{where}'")


class Node:
    """One vertex of the computation graph.

    ``op`` is the operation tag, ``parents`` the incoming nodes, ``value``
    the forward result, and ``adjoint`` the gradient of the backward root
    with respect to this node (same shape as ``value``, allocated during
    the backward pass, ``None`` before it).
    """

    __slots__ = ("op", "parents", "value", "adjoint", "is_param", "name", "_vjps")

    def __init__(
        self,
        op: str,
        value,
        parents: Sequence["Node"] = (),
        vjps: Sequence[Callable[[np.ndarray], np.ndarray]] = (),
        is_param: bool = False,
        name: str | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        _require_finite(value, op)
        self.op = op
        self.parents = tuple(parents)
        self._vjps = tuple(vjps)
        self.value = value
        self.adjoint: np.ndarray | None = None
        self.is_param = is_param
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(op={self.op!r}, shape={self.shape}{tag})"

    # Arithmetic sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)


def constant(value) -> Node:
    """Leaf holding a fixed value; no gradient is collected for it."""
    return Node("const", value)


def param(value, name: str | None = None) -> Node:
    """Leaf marked as a trainable parameter; :func:`backward` reports its adjoint."""
    return Node("param", value, is_param=True, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` (inverse of numpy broadcasting)."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    with np.errstate(all="ignore"):
        value = a.value + b.value
    return Node(
        "add",
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a, b) -> Node:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    with np.errstate(all="ignore"):
        value = a.value * b.value
    return Node(
        "mul",
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def affine(x, w, b) -> Node:
    """``x @ w + b`` for a single input vector or a batch of row vectors."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if w.value.ndim != 2:
        raise ValueError(f"affine weight must be 2-D, got shape {w.value.shape}")
    if x.value.ndim not in (1, 2) or x.value.shape[-1] != w.value.shape[0]:
        raise ValueError(
            f"affine input shape {x.value.shape} incompatible with weight {w.value.shape}"
        )
    if b.value.shape != (w.value.shape[1],):
        raise ValueError(
            f"affine bias shape {b.value.shape} incompatible with weight {w.value.shape}"
        )
    with np.errstate(all="ignore"):
        value = x.value @ w.value + b.value

    def d_x(g):
        return g @ w.value.T

    def d_w(g):
        if x.value.ndim == 1:
            return np.outer(x.value, g)
        return x.value.T @ g

    def d_b(g):
        return g if g.ndim == 1 else g.sum(axis=0)

    return Node("affine", value, (x, w, b), (d_x, d_w, d_b))


def tanh(x) -> Node:
    x = as_node(x)
    value = np.tanh(x.value)
    return Node("tanh", value, (x,), (lambda g: g * (1.0 - value * value),))


def relu(x) -> Node:
    x = as_node(x)
    value = np.maximum(x.value, 0.0)
    return Node("relu", value, (x,), (lambda g: g * (x.value > 0.0),))


def exp(x) -> Node:
    x = as_node(x)
    with np.errstate(all="ignore"):
        value = np.exp(x.value)
    _require_finite(value, "exp")
    return Node("exp", value, (x,), (lambda g: g * value,))


def log(x) -> Node:
    x = as_node(x)
    with np.errstate(all="ignore"):
        value = np.log(x.value)
    _require_finite(value, "log")
    return Node("log", value, (x,), (lambda g: g / x.value,))


def softmax(x) -> Node:
    """Max-shifted softmax along the last axis."""
    x = as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def d_x(g):
        inner = (g * value).sum(axis=-1, keepdims=True)
        return value * (g - inner)

    return Node("softmax", value, (x,), (d_x,))


def logsumexp(x) -> Node:
    """Max-shifted log-sum-exp along the last axis; drops that axis."""
    x = as_node(x)
    m = x.value.max(axis=-1, keepdims=True)
    value = np.log(np.exp(x.value - m).sum(axis=-1)) + m[..., 0]

    def d_x(g):
        soft = np.exp(x.value - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        return soft * g[..., None]

    return Node("log-sum-exp", value, (x,), (d_x,))


def log_softmax(x) -> Node:
    """Numerically stable ``x - logsumexp(x)`` along the last axis."""
    x = as_node(x)
    lse = logsumexp(x)
    return sub(x, reshape(lse, lse.value.shape + (1,)))


def reduce_sum(x, axis: int | None = None) -> Node:
    """Sum over all elements (``axis=None``, scalar result) or one axis."""
    x = as_node(x)
    if axis is None:
        value = x.value.sum()

        def d_x(g):
            return np.full(x.value.shape, g)

    else:
        ax = axis if axis >= 0 else x.value.ndim + axis
        if not 0 <= ax < x.value.ndim:
            raise ValueError(f"reduce_sum axis {axis} out of range for shape {x.value.shape}")
        value = x.value.sum(axis=ax)

        def d_x(g):
            return np.broadcast_to(np.expand_dims(g, ax), x.value.shape)

    return Node("reduce-sum", value, (x,), (d_x,))


def concat(parts: Iterable, axis: int = -1) -> Node:
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ValueError("concat requires at least one input")
    value = np.concatenate([p.value for p in parts], axis=axis)
    ax = axis if axis >= 0 else value.ndim + axis

    vjps = []
    offset = 0
    for p in parts:
        width = p.value.shape[ax]

        def d_p(g, start=offset, stop=offset + width):
            idx = (slice(None),) * ax + (slice(start, stop),)
            return g[idx]

        vjps.append(d_p)
        offset += width
    return Node("concatenate", value, parts, vjps)


def slice_(x, start: int, stop: int, axis: int = -1) -> Node:
    """Contiguous slice ``[start:stop)`` along one axis."""
    x = as_node(x)
    ax = axis if axis >= 0 else x.value.ndim + axis
    if not 0 <= ax < x.value.ndim:
        raise ValueError(f"slice axis {axis} out of range for shape {x.value.shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    value = x.value[idx]

    def d_x(g):
        out = np.zeros(x.value.shape)
        out[idx] = g
        return out

    return Node("slice", value, (x,), (d_x,))


def reshape(x, shape: tuple[int, ...]) -> Node:
    x = as_node(x)
    value = x.value.reshape(shape)
    return Node("reshape", value, (x,), (lambda g: g.reshape(x.value.shape),))


def clip(x, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the gradient passes only where ``x`` is inside."""
    x = as_node(x)
    value = np.clip(x.value, lo, hi)
    inside = (x.value >= lo) & (x.value <= hi)
    return Node("clip", value, (x,), (lambda g: g * inside,))


def _topo_order(root: Node) -> list[Node]:
    """Parents-before-children ordering of every node reachable from ``root``."""
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


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root`` for every parameter leaf.

    Returns a map from parameter nodes (leaves created with :func:`param`
    and reachable from ``root``) to their adjoints.  Adjoints of all
    visited nodes are (re)allocated, so calling this twice on the same
    graph gives bit-identical results.
    """
    if root.value.shape != ():
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    for node in order:
        node.adjoint = None
    root.adjoint = np.ones(())

    grads: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = node.adjoint
        if g is None:  # not on any path that feeds the root
            continue
        _require_finite(g, f"adjoint of {node.op}")
        if node.is_param:
            grads[node] = g
        for parent, vjp in zip(node.parents, node._vjps):
            with np.errstate(all="ignore"):
                contrib = np.asarray(vjp(g), dtype=np.float64)
            if contrib.shape != parent.value.shape:
                raise ValueError(
                    f"adjoint shape {contrib.shape} does not match parent "
                    f"value shape {parent.value.shape} (op {node.op})"
                )
            parent.adjoint = contrib if parent.adjoint is None else parent.adjoint + contrib
    return grads


def grad_check(
    fn: Callable[[dict[str, Node]], Node],
    point: dict[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``fn`` maps a dict of leaf nodes to a scalar node and is re-evaluated
    from scratch for every perturbed coordinate.  The error for one
    coordinate is ``|ad - fd| / max(1, |ad|, |fd|)``; the unit floor keeps
    near-zero gradients from inflating the ratio with pure truncation
    noise.
    """
    if h <= 0:
        raise ValueError("grad_check step h must be positive")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    leaves = {k: param(v, name=k) for k, v in point.items()}
    grads = backward(fn(leaves))
    auto = {k: grads.get(leaves[k], np.zeros_like(point[k])) for k in point}

    def evaluate(values: dict[str, np.ndarray]) -> float:
        out = fn({k: param(v, name=k) for k, v in values.items()})
        if out.value.shape != ():
            raise ValueError("grad_check function must return a scalar node")
        return float(out.value)

    worst = 0.0
    for name, base in point.items():
        flat = base.ravel()
        ad_flat = auto[name].ravel()
        for i in range(flat.size):
            bumped = dict(point)
            plus = base.copy().ravel()
            plus[i] += h
            bumped[name] = plus.reshape(base.shape)
            f_plus = evaluate(bumped)
            minus = base.copy().ravel()
            minus[i] -= h
            bumped[name] = minus.reshape(base.shape)
            f_minus = evaluate(bumped)
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(ad_flat[i] - fd) / max(1.0, abs(ad_flat[i]), abs(fd))
            worst = max(worst, err)
    return worst
