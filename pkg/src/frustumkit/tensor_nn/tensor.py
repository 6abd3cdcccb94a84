"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded
whenever one of their inputs requires a gradient.  ``backward(loss, tape)``
replays the records in exact reverse order and accumulates ``.grad`` on every
leaf tensor that requires it.  Outside a tape, operations are plain numpy
evaluations (inference mode).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonFiniteLoss

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the recorded primitives below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive ops with the closures needed for backward."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, self)


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every participating leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss(f"loss is {float(loss.data)}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi
        if out is not loss:
            out.grad = None  # intermediate buffers are released as soon as consumed


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, fn):
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, inputs, fn))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), fn)


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _record(out, (x,), lambda g: (g * (out > 0),))


def cos(x):
    x = as_tensor(x)
    xd = x.data
    return _record(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def sin(x):
    x = as_tensor(x)
    xd = x.data
    return _record(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def huber(x, delta=1.0):
    """Elementwise smooth-l1: 0.5 r^2 inside |r| <= delta, linear outside."""
    x = as_tensor(x)
    r = x.data
    a = np.abs(r)
    inside = a <= delta
    out = np.where(inside, 0.5 * r * r, delta * (a - 0.5 * delta))
    return _record(out, (x,), lambda g: (g * np.where(inside, r, delta * np.sign(r)),))


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; gradient at the origin is taken as 0."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis))

    def fn(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.expand_dims(g, axis) * np.where(nk > 0, xd / safe, 0.0),)

    return _record(n, (x,), fn)


_PI = math.pi


def wrap_half_turn(x):
    """Shift angles by whole multiples of pi into [-pi/2, pi/2).

    Each step subtracts (or adds) pi from a value in [pi/2, 2pi] (resp.
    [-2pi, -pi/2]), which is exact in IEEE arithmetic, so two inputs that differ
    by an exactly-represented pi land on bit-identical outputs.  The gradient
    is the identity.
    """
    x = as_tensor(x)
    out = np.array(x.data, dtype=np.float64, copy=True)
    while True:
        hi = out >= _PI / 2
        lo = out < -_PI / 2
        if not (hi.any() or lo.any()):
            break
        out[hi] -= _PI
        out[lo] += _PI
    return _record(out, (x,), lambda g: (g,))


# --- reductions, shape ops ---------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), fn)


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; backward splits the gradient back."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def max_pool_points(x):
    """Max over the point axis (-2) of a ``[..., N, C]`` tensor.

    Returns ``(pooled[..., C], argmax[..., C])``.  ``np.argmax`` picks the first
    maximal row, so on ties the lowest point index receives the gradient.
    """
    x = as_tensor(x)
    xd = x.data
    idx = np.argmax(xd, axis=-2)
    pooled = np.take_along_axis(xd, idx[..., None, :], axis=-2)[..., 0, :]

    def fn(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _record(pooled, (x,), fn), idx


# --- fused layers --------------------------------------------------------------------


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis, for any number of leading axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        inputs = (x, weight, bias)
    out = out.reshape(lead + (wd.shape[1],))

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, fn)


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of softmax(logits) against integer ``labels``.

    ``logits`` has classes on the last axis; the result drops that axis.
    """
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]

    def fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return ((p - onehot) * g[..., None],)

    return _record(-picked, (logits,), fn)


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        p = np.exp(logp)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(logp, (x,), fn)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalise over every axis but the last using the batch statistics.

    Returns ``(y, batch_mean, batch_var)`` so the caller can update running
    estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    m = xd.size // xd.shape[-1]
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def fn(g):
        ggam = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return gx, ggam, gbeta

    return _record(out, (x, gamma, beta), fn), mu, var
