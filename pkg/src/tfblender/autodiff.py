"""Tape-based reverse-mode differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape they just compute values, which is how inference runs::

    with Tape() as tape:
        w = tape.leaf(w0)
        loss = mean(square(sub(mul(w, x), y)))
    grads = tape.backward(loss)     # {w: dL/dw}

Nodes are appended in creation order, so the tape is already a topological
order of the graph and the backward sweep is a single reverse pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeMismatchError,
    channel_softmax_array,
    conv2d_same_array,
    conv2d_same_backward_array,
)

_ACTIVE = []


class Var:
    """A value on (or off) the tape.  ``parents`` and ``rule`` are ``None`` for leaves."""

    __slots__ = ("value", "op", "parents", "rule", "tape", "__weakref__")

    def __init__(self, value, op="const", parents=(), rule=None, tape=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.rule = rule
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes = []
        self.leaves = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def leaf(self, value):
        v = Var(np.asarray(value), op="leaf", tape=self)
        self.leaves.append(v)
        return v

    def backward(self, loss, wrt=None):
        """Gradients of scalar ``loss`` for every leaf (or just ``wrt``)."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.rule(g)):
                if pg is None or parent.tape is not self:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        targets = self.leaves if wrt is None else wrt
        out = {}
        for leaf in targets:
            g = grads.get(id(leaf))
            out[leaf] = np.zeros_like(leaf.value) if g is None else g
        return out


def backward(loss, wrt=None):
    if loss.tape is None:
        raise ValueError("loss was not recorded on a tape")
    return loss.tape.backward(loss, wrt)


def constant(value):
    return value if isinstance(value, Var) else Var(np.asarray(value))


def _record(value, op, parents, rule):
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is None or not any(p.tape is tape for p in parents):
        return Var(value, op=op)
    node = Var(value, op=op, parents=parents, rule=rule, tape=tape)
    tape.nodes.append(node)
    return node


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- differentiable ops --------------------------------------------------------


def add(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _record(av * bv, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a):
    a = constant(a)
    return _record(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, factor):
    a = constant(a)
    return _record(a.value * factor, "scale", (a,), lambda g: (g * factor,))


def square(a):
    a = constant(a)
    av = a.value
    return _record(av * av, "square", (a,), lambda g: (2 * g * av,))


def relu(a):
    a = constant(a)
    mask = a.value > 0  # subgradient 0 at 0
    return _record(np.where(mask, a.value, 0).astype(a.value.dtype), "relu", (a,),
                   lambda g: (g * mask,))


def channel_softmax(a):
    a = constant(a)
    y = channel_softmax_array(a.value)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-3, keepdims=True)),)

    return _record(y, "channel_softmax", (a,), rule)


def conv2d(x, weights, bias):
    x, weights, bias = constant(x), constant(weights), constant(bias)
    if x.shape[-3] != weights.shape[1]:
        raise ShapeMismatchError(
            f"conv expects {weights.shape[1]} input channels, got {x.shape[-3]}"
        )
    xv, wv = x.value, weights.value
    out = conv2d_same_array(xv, wv, bias.value)
    return _record(out, "conv2d", (x, weights, bias),
                   lambda g: conv2d_same_backward_array(xv, wv, g))


def concat(parts, axis):
    parts = [constant(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([p.value for p in parts], axis=axis), "concat",
                   tuple(parts), rule)


def take(a, index, axis):
    a = constant(a)
    index = np.asarray(index)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (out,)

    return _record(np.take(a.value, index, axis=axis), "take", (a,), rule)


def broadcast_to(a, shape):
    a = constant(a)
    old = a.shape
    return _record(np.broadcast_to(a.value, shape), "broadcast_to", (a,),
                   lambda g: (_unbroadcast(g, old),))


def reshape(a, shape):
    a = constant(a)
    old = a.shape
    return _record(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", (a,), rule)


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(pred, target):
    return mean(square(sub(pred, target)))


# -- verification & optimisation ----------------------------------------------


@dataclass
class GradientReport:
    """Outcome of comparing analytic and central-difference gradients."""

    op: str
    max_rel_err: float
    max_abs_err: float
    epsilon: float
    per_param_rel: list = field(default_factory=list)
    per_param_abs: list = field(default_factory=list)
    precision: str = "double"

    def to_json(self):
        return {"op": self.op, "max_rel_err": self.max_rel_err,
                "max_abs_err": self.max_abs_err, "epsilon": self.epsilon}

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def finite_difference_check(forward_fn, params, epsilon=1e-5, op="composite"):
    """Compare reverse-mode gradients with central differences.

    ``forward_fn`` maps a list of Vars (leaves on the active tape) to a scalar
    Var.  ``params`` is a list of float64 arrays; they are not modified.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    params = [np.array(p, dtype=np.float64) for p in params]
    if not params or sum(p.size for p in params) == 0:
        return GradientReport(op, 0.0, 0.0, epsilon)

    def value_at(arrays):
        return float(forward_fn([constant(a) for a in arrays]).value)

    base = value_at(params)
    if value_at(params) != base:
        raise RuntimeError("forward_fn is not deterministic: repeated evaluations differ")

    with Tape() as tape:
        leaves = [tape.leaf(p) for p in params]
        loss = forward_fn(leaves)
    analytic = tape.backward(loss, leaves)

    rel_errs, abs_errs = [], []
    for i, p in enumerate(params):
        numeric = np.zeros_like(p)
        flat = numeric.reshape(-1)
        for k in range(p.size):
            shifted = [q.copy() for q in params]
            shifted[i].reshape(-1)[k] += epsilon
            up = value_at(shifted)
            shifted[i].reshape(-1)[k] -= 2 * epsilon
            down = value_at(shifted)
            flat[k] = (up - down) / (2 * epsilon)
        a = analytic[leaves[i]]
        err = np.abs(a - numeric)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
        rel_errs.append(float((err / denom).max()))
        abs_errs.append(float(err.max()))
    return GradientReport(op, max(rel_errs), max(abs_errs), epsilon, rel_errs, abs_errs)


def sgd_step(params, grads, learning_rate):
    """Plain SGD, ``p - lr * g`` for every array; inputs are left untouched.

    ``params`` is either a list of arrays or an object with ``arrays()`` and
    ``with_arrays()`` (e.g. ``MiniNetParams``); the same kind is returned.
    """
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    if hasattr(params, "with_arrays"):
        return params.with_arrays(sgd_step(params.arrays(), list(grads), learning_rate))
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} params but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} does not match param {p.shape}")
        out.append((p - learning_rate * g).astype(p.dtype, copy=False))
    return out
