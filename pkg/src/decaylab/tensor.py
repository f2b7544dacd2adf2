"""Dense float64 tensors with a reverse-mode gradient tape.

Every value in the library is carried by :class:`Tensor`, a thin wrapper
around a float64 numpy array.  Operations record backward rules on the
currently active :class:`Tape`; calling :func:`backward` on a scalar root
walks the tape in reverse creation order, which makes gradient
accumulation deterministic and reruns bitwise reproducible.

If no tape is active, operations simply compute forward values.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tape:
    """Records operations for reverse-mode differentiation.

    A tape is confined to one logical thread of execution.  Use as a
    context manager::

        with Tape():
            loss = ...
            grads = backward(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = []


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Immutable-by-convention dense float64 array.

    ``grad`` is populated by :func:`backward` for tensors created with
    ``requires_grad=True`` (leaves) and for intermediates on the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return power(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents, backward_fn):
    """Attach a backward rule to ``out`` if a tape is active."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn
    tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t, g):
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _record(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bw(g):
        _accum(a, -g)

    return _record(out, (a,), bw)


def power(a, b):
    """Elementwise a**b; base must be positive where the exponent is live."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data ** b.data)

    def bw(g):
        _accum(a, g * b.data * a.data ** (b.data - 1.0))
        if b.requires_grad:
            _accum(b, g * out.data * np.log(a.data))

    return _record(out, (a, b), bw)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        _accum(a, g * out.data)

    return _record(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def bw(g):
        _accum(a, g / a.data)

    return _record(out, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bw(g):
        _accum(a, g * 0.5 / out.data)

    return _record(out, (a,), bw)


def sigmoid(a):
    """1 / (1 + exp(-x)), computed stably on both tails."""
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data)

    def bw(g):
        _accum(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), bw)


def silu(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = sigmoid(a)
    return mul(a, s)


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def bw(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * sig)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False, allow_empty=False):
    """log(sum(exp(x))) along ``axis``, stable under large inputs.

    An empty reduction axis raises unless ``allow_empty`` is set, in which
    case the -inf sentinel of an empty sum is returned.
    """
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        if not allow_empty:
            raise ValueError("logsumexp over an empty axis (pass allow_empty=True to opt in)")
        shape = list(a.data.shape)
        if keepdims:
            shape[axis] = 1
        else:
            del shape[axis % len(shape)]
        return Tensor(np.full(shape, -np.inf))
    m = a.data.max(axis=axis, keepdims=True)
    z = np.exp(a.data - m)
    s = z.sum(axis=axis, keepdims=True)
    res = m + np.log(s)
    out = Tensor(res if keepdims else np.squeeze(res, axis=axis))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, g * z / s)

    return _record(out, (a,), bw)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        gg = g
        if a.data.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.data.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.data.ndim == 1:
            ga = ga.reshape(a.data.shape) if ga.ndim <= 2 else ga.sum(axis=tuple(range(ga.ndim - 2))).reshape(a.data.shape)
            _accum(a, ga)
        else:
            _accum(a, ga)
        if b.data.ndim == 1:
            gb = gb.reshape(b.data.shape) if gb.ndim <= 2 else gb.sum(axis=tuple(range(gb.ndim - 2))).reshape(b.data.shape)
            _accum(b, gb)
        else:
            _accum(b, gb)

    return _record(out, (a, b), bw)


def rmsnorm(x, gamma, eps=1e-6):
    """x / sqrt(mean(x^2) + eps) * gamma along the last axis."""
    if eps < 0:
        raise ValueError("rmsnorm: eps must be >= 0")
    x, gamma = as_tensor(x), as_tensor(gamma)
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(div(x, sqrt(add(ms, eps))), gamma)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))

    def bw(g):
        _accum(a, np.transpose(g, np.argsort(axes)))

    return _record(out, (a,), bw)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bw(g):
        _accum(a, g)

    return _record(out, (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, p in zip(tensors, pieces):
            _accum(t, p)

    return _record(out, tuple(tensors), bw)


def take(a, idx):
    """Indexing/gather; backward scatter-adds into the source."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(root):
    """Accumulate gradients of a scalar ``root`` over the active tape.

    Returns a list of (tensor, grad) for the tape's leaves is not kept;
    gradients land on each tensor's ``grad`` attribute.  Accumulation
    order is fixed reverse tape order.
    """
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward: no active tape")
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
