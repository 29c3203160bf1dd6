"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects
in execution order, so the list itself is a valid topological order.  The
backward sweep walks it in reverse and accumulates vector-Jacobian products.

Only the operations needed by the dynamics, the policy and the losses are
provided.  All values carry a leading batch dimension in practice, but the
engine itself is shape-agnostic and broadcasting-aware.

Temporal gradient decay is expressed with :meth:`Tape.decay`: an identity in
the forward pass whose backward pass multiplies the incoming gradient by a
constant factor.  Rollouts insert one such gate on the carried vehicle state
at every step, which scales each state-to-state Jacobian by ``exp(-alpha*dt)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation

NARROW = np.float32
WIDE = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "value", "parents", "vjp", "index", "name")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node's reflected ops

    def __init__(self, tape, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape}, name={self.name})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Operation record for one rollout (or one batch of rollouts).

    Args:
        dtype: ``np.float32`` (narrow, default) or ``np.float64`` (wide,
            used for gradient checks).
    """

    def __init__(self, dtype=NARROW):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        # called as hook(node, incoming_grad) when a decay gate is traversed
        self.decay_hook: Callable | None = None

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> Node:
        """Register a learnable leaf whose gradient is returned by backward."""
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} already on tape")
        node = Node(self, np.array(value, dtype=self.dtype), name=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        """A non-differentiable leaf."""
        return Node(self, np.asarray(value, dtype=self.dtype))

    def decay(self, x: Node, factor: float) -> Node:
        """Identity whose backward pass scales the gradient by ``factor``."""
        x = self._lift(x)
        f = float(factor)

        def vjp(g):
            if self.decay_hook is not None:
                self.decay_hook(out, g)
            return (g * f,)

        out = Node(self, x.value, (x,), vjp)
        return out

    def detach(self, x) -> Node:
        """Copy of ``x`` with no gradient path."""
        if isinstance(x, Node):
            x = x.value
        return self.const(x)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractViolation("node belongs to a different tape")
            return x
        return self.const(x)

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns:
            Mapping from parameter name to gradient (zeros for parameters
            that do not influence the loss).
        """
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ContractViolation("loss must be a node on this tape")
        if loss.value.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None) if node.name is None else grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        out = {}
        for name, node in self.params.items():
            g = grads.get(node.index)
            out[name] = np.zeros_like(node.value) if g is None else _unbroadcast(g, node.value.shape)
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractViolation("at least one operand must be a Node")


def _vals(*xs):
    dtype = _tape_of(*xs).dtype
    return [x.value if isinstance(x, Node) else np.asarray(x, dtype=dtype) for x in xs]


def _op(value, inputs: Sequence, vjps: Sequence[Callable]) -> Node:
    """Create a node; ``vjps[i]`` maps the output gradient to input ``i``'s."""
    tape = _tape_of(*inputs)
    parents = []
    fns = []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Node):
            parents.append(tape._lift(x))
            fns.append(fn)
    fns = tuple(fns)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    if not parents:
        return tape.const(value)
    return Node(tape, np.asarray(value, dtype=tape.dtype), tuple(parents), vjp)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    av, bv = _vals(a, b)
    sa, sb = np.shape(av), np.shape(bv)
    return _op(av + bv, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    av, bv = _vals(a, b)
    sa, sb = np.shape(av), np.shape(bv)
    return _op(av - bv, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    av, bv = _vals(a, b)
    sa, sb = np.shape(av), np.shape(bv)
    return _op(
        av * bv, (a, b), (lambda g: _unbroadcast(g * bv, sa), lambda g: _unbroadcast(g * av, sb))
    )


def div(a, b) -> Node:
    av, bv = _vals(a, b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _op(
        out,
        (a, b),
        (lambda g: _unbroadcast(g / bv, sa), lambda g: _unbroadcast(-g * out / bv, sb)),
    )


def square(x: Node) -> Node:
    xv = x.value
    return _op(xv * xv, (x,), (lambda g: 2.0 * g * xv,))


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)
    return _op(out, (x,), (lambda g: np.where(out > 0, 0.5 * g / np.where(out > 0, out, 1), 0),))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return _op(out, (x,), (lambda g: g * out,))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return _op(out, (x,), (lambda g: g * (1.0 - out * out),))


def sigmoid(x: Node) -> Node:
    out = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return _op(out, (x,), (lambda g: g * out * (1.0 - out),))


def relu(x: Node) -> Node:
    """``max(x, 0)``; the derivative at 0 is taken as 0."""
    xv = x.value
    return _op(np.maximum(xv, 0), (x,), (lambda g: g * (xv > 0),))


def softplus(x: Node) -> Node:
    """``ln(1 + e^x)`` evaluated without overflow."""
    xv = x.value
    out = np.logaddexp(0, xv)
    sig = 0.5 * (np.tanh(0.5 * xv) + 1.0)
    return _op(out, (x,), (lambda g: g * sig,))


def smooth_l1(x: Node, beta: float = 1.0) -> Node:
    """Huber-style smooth L1 of ``x`` against zero (quadratic below ``beta``)."""
    xv = x.value
    ax = np.abs(xv)
    quad = ax < beta
    out = np.where(quad, 0.5 * xv * xv / beta, ax - 0.5 * beta)
    return _op(out, (x,), (lambda g: g * np.where(quad, xv / beta, np.sign(xv)),))


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    xv = x.value
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _op(xv.sum(axis=axis, keepdims=keepdims), (x,), (vjp,))


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def norm(x: Node, axis=-1) -> Node:
    """Euclidean norm along ``axis``; the gradient at the origin is zero."""
    xv = x.value
    out = np.sqrt(np.sum(xv * xv, axis=axis))

    def vjp(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1)
        return np.where(o > 0, np.expand_dims(g, axis) * xv / safe, 0)

    return _op(out, (x,), (vjp,))


def dot(a, b, axis=-1) -> Node:
    return sum(mul(a, b), axis=axis)


def matmul(a, b) -> Node:
    av, bv = _vals(a, b)

    def ga(g):
        return g @ np.swapaxes(bv, -1, -2)

    def gb(g):
        if av.ndim == 1:
            return np.outer(av, g)
        out = np.swapaxes(av, -1, -2) @ g
        if out.ndim > bv.ndim:
            out = out.reshape((-1,) + bv.shape).sum(axis=0)
        return out

    return _op(av @ bv, (a, b), (ga, gb))


def getitem(x: Node, idx) -> Node:
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        if _has_fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return out

    return _op(xv[idx], (x,), (vjp,))


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return _op(x.value.reshape(shape), (x,), (lambda g: g.reshape(old),))


def concat(xs: Sequence, axis=-1) -> Node:
    vals = _vals(*xs)
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def make(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]

        return vjp

    return _op(np.concatenate(vals, axis=axis), xs, [make(i) for i in range(len(xs))])


def stack(xs: Sequence, axis=0) -> Node:
    vals = _vals(*xs)

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return _op(np.stack(vals, axis=axis), xs, [make(i) for i in range(len(xs))])


def where(cond, a, b) -> Node:
    """Elementwise select with a constant boolean mask."""
    cond = np.asarray(cond)
    av, bv = _vals(a, b)
    sa, sb = np.shape(av), np.shape(bv)
    return _op(
        np.where(cond, av, bv),
        (a, b),
        (lambda g: _unbroadcast(np.where(cond, g, 0), sa), lambda g: _unbroadcast(np.where(cond, 0, g), sb)),
    )


def linear_vjp(x: Node, value, jac_t: Callable) -> Node:
    """Custom unary op with a user-supplied vector-Jacobian product."""
    return _op(value, (x,), (jac_t,))
