"""Reverse-mode automatic differentiation over dense float tensors.

Values are numpy arrays (float32 by default) plus an optional gradient slot. Operations
executed while a :class:`Tape` is active, and touching at least one value that
requires a gradient, append a :class:`Node` to that tape. :func:`backward`
walks the tape once in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import bmm

DEFAULT_DTYPE = np.float32


class Value:
    """A tensor with an optional gradient and an optional tape node."""

    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Value, ...]
    out: Value
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Append-only record of operations, usable as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Value) -> None:
        backward(self, loss)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, out_data: np.ndarray, inputs: tuple[Value, ...], bwd) -> Value:
    out = Value(out_data)
    tape = active_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, bwd)
        tape.nodes.append(out.node)
    return out


def backward(tape: Tape, loss: Value) -> None:
    """Populate ``.grad`` of every leaf that requires a gradient and reaches ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients do not persist.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    pending: dict[Node, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(node, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate_leaf(inp, gi)
            elif inp.node in pending:
                pending[inp.node] = pending[inp.node] + gi
            else:
                pending[inp.node] = gi


def _accumulate_leaf(v: Value, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=v.data.dtype).reshape(v.shape)
    if v.grad is None:
        v.grad = g.copy()
    else:
        v.grad += g


def as_value(x, like: Value | None = None) -> Value:
    if isinstance(x, Value):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Value(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------- products


def matmul(a: Value, b: Value) -> Value:
    """``a`` [..., m, k] times ``b`` [k, n] or [..., k, n] with matching batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    lead = a.shape[:-2]
    if b.ndim == 2:
        # fold batch into rows: per-element order is unchanged
        out = bmm(a.data.reshape(1, -1, k), b.data[None])
    else:
        out = bmm(a.data.reshape(-1, m, k), b.data.reshape(-1, k, n))
    out = out.reshape(lead + (m, n))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2)
            if b.ndim == 2:
                ga = bmm(g.reshape(1, -1, n), bt[None]).reshape(a.shape)
            else:
                ga = bmm(g.reshape(-1, m, n), bt.reshape(-1, n, k)).reshape(a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                at = a.data.reshape(-1, k).T
                gb = bmm(at[None], g.reshape(1, -1, n))[0]
            else:
                at = np.swapaxes(a.data, -1, -2).reshape(-1, k, m)
                gb = bmm(at, g.reshape(-1, m, n)).reshape(b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


# ------------------------------------------------------------------ elementwise


def _check_broadcast(a: Value, b: Value, op: str) -> bool:
    """True when ``b`` is a trailing-axis vector (or scalar) broadcast onto ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 0 or (b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]):
        return True
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Value:
    if not isinstance(a, Value):
        a, b = b, a
    b = as_value(b, a)
    if a.shape != b.shape and b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "add")

    def bwd(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _record("add", a.data + b.data, (a, b), bwd)


def mul(a, b) -> Value:
    if not isinstance(a, Value):
        a, b = b, a
    b = as_value(b, a)
    if a.shape != b.shape and b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "mul")

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Value) -> Value:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * xd * xd * xd)
    t = np.tanh(inner)
    out = xd.dtype.type(0.5) * xd * (1 + t)

    def bwd(g):
        dinner = c * (1 + 3 * k * xd * xd)
        return (g * (xd.dtype.type(0.5) * (1 + t) + xd.dtype.type(0.5) * xd * (1 - t * t) * dinner),)

    return _record("gelu", out, (x,), bwd)


def elementwise(kind: str, *inputs) -> Value:
    if kind == "add":
        return add(*inputs)
    if kind == "mul":
        return mul(*inputs)
    if kind == "gelu":
        return gelu(*inputs)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------- normalisers


def softmax(x: Value, mask: np.ndarray | None = None) -> Value:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed cells."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax needs a non-empty last axis")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    y = z - z.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), bwd)


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, d).sum(axis=0)
        return gx, ggam, gbet

    return _record("layer_norm", out, (x, gamma, beta), bwd)


# ------------------------------------------------------------------ indexing


def embedding_lookup(table: Value, ids) -> Value:
    """Gather rows of ``table`` [V, D]; ``ids`` may have any integer shape."""
    idx = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        bad = int(idx[(idx < 0) | (idx >= V)].reshape(-1)[0])
        raise IndexError(f"embedding id {bad} outside table of {V} rows")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), bwd)


def cross_entropy(logits: Value, targets) -> Value:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    t = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size == 0:
        raise ValueError("cross_entropy needs at least one position")
    if t.min() < 0 or t.max() >= V:
        raise IndexError(f"target outside [0, {V})")
    z = logits.data.reshape(-1, V)
    tf = t.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(tf.size)
    nll = lse - z[rows, tf]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, tf] -= 1
        return ((p * (g / tf.size)).reshape(logits.shape),)

    return _record("cross_entropy", out, (logits,), bwd)


# ------------------------------------------------------------------ shaping


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Value, axes: tuple[int, ...]) -> Value:
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = tuple(values)
    axis = axis % values[0].ndim
    out = np.concatenate([v.data for v in values], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def bwd(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            sl[axis] = slice(int(lo), int(hi))
            grads.append(np.ascontiguousarray(g[tuple(sl)]) if v.requires_grad else None)
        return grads

    return _record("concat", out, values, bwd)


def take(x: Value, start: int, stop: int, axis: int = 0) -> Value:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = np.ascontiguousarray(x.data[sl])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record("take", out, (x,), bwd)


# ----------------------------------------------------------------- reductions


def sum_all(x: Value) -> Value:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Value, axis: int, keepdims: bool = False) -> Value:
    axis = axis % x.ndim
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("mean", out, (x,), bwd)


def max_reduce(x: Value, axis: int) -> Value:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    arg = x.data.argmax(axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record("max", out, (x,), bwd)
