"""Minimal reverse-mode autodiff over numpy arrays.

Everything is float64. A Tensor wraps an ndarray plus an optional gradient
buffer; ops build a tape of parent links and backward closures which
``Tensor.backward()`` replays in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    # -- basics -----------------------------------------------------------

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

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # -- autograd ---------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("implicit backward requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    """Leaf tensor tracked by optimizers."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data + b.data, _needs_grad(a, b), (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = bw
    return out


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data * b.data, _needs_grad(a, b), (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = bw
    return out


def power(a, p):
    a = astensor(a)
    out = Tensor(a.data**p, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1))

    out._backward = bw
    return out


def texp(a):
    a = astensor(a)
    val = np.exp(a.data)
    out = Tensor(val, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * val)

    out._backward = bw
    return out


def tlog(a):
    a = astensor(a)
    out = Tensor(np.log(a.data), a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    out._backward = bw
    return out


def sigmoid(a):
    a = astensor(a)
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(val, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * val * (1.0 - val))

    out._backward = bw
    return out


def tanh(a):
    a = astensor(a)
    val = np.tanh(a.data)
    out = Tensor(val, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - val * val))

    out._backward = bw
    return out


def relu(a):
    a = astensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    out._backward = bw
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU: x * Phi(x)."""
    a = astensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data**2)
            a._accumulate(g * (cdf + a.data * pdf))

    out._backward = bw
    return out


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    a = astensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    out._backward = bw
    return out


def transpose(a, axes=None):
    a = astensor(a)
    out = Tensor(np.transpose(a.data, axes), a.requires_grad, (a,))
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _needs_grad(*tensors),
        tuple(tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out._backward = bw
    return out


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = astensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx], a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    out._backward = bw
    return out


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim <= 2 else -2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _needs_grad(a, b), (a, b))

    def bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                a._accumulate(np.outer(g, b.data) if a.ndim == 2 else g * b.data)
            else:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                b._accumulate(np.outer(a.data, g) if b.ndim == 2 else g * a.data)
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out._backward = bw
    return out


# -- softmax family ----------------------------------------------------------


def log_softmax(a, axis=-1):
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    val = shifted - logz
    out = Tensor(val, a.requires_grad, (a,))

    def bw(g):
        if a.requires_grad:
            soft = np.exp(val)
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


def softmax(a, axis=-1):
    return texp(log_softmax(a, axis=axis))


def logsumexp_np(x, axis=None):
    """Numerically safe log-sum-exp on plain arrays (handles -inf)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return float(out.reshape(())) if axis is None else np.squeeze(out, axis=axis)


# -- gradient checking --------------------------------------------------------


def finite_difference_check(fn, params, h=1e-4):
    """Max relative error between backward grads and central differences.

    `fn` maps the parameter list to a scalar Tensor.  Gradients are compared
    elementwise with relative error |a - n| / max(1, |a|, |n|).
    """
    for p in params:
        p.zero_grad()
    fn(params).backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(params).item()
            flat[i] = orig - h
            dn = fn(params).item()
            flat[i] = orig
            numeric = (up - dn) / (2 * h)
            a = analytic.ravel()[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
