"""Reverse-mode differentiation over dense float64 arrays, plus AdamW.

Every op returns a new :class:`Tensor`. When any input requires gradients the
result records its parents and a closure mapping the output gradient to the
parent gradients. :func:`backward` walks that tape once in reverse
topological order.

Binary elementwise ops broadcast only over leading axes: one shape must be a
suffix of the other (or a scalar).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MASK_VALUE = -1e30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
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

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 1000

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, grad_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _check_leading(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("subtract", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("multiply", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("divide", a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("minimum", a, b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading("maximum", a, b)
    pick_a = a.data >= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # activations (..., k) against a weight matrix: one flat GEMM each way
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))

        def grad_flat(g):
            g2 = g.reshape(-1, m)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), grad_flat)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return _result(a.data * on, (a,), lambda g: (g * on,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sin(a):
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def abs_(a):
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[i] for i in axes)
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def getitem(a, idx):
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concatenate: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# fused ops


def masked_softmax(a, mask=None):
    """Softmax over the last axis. ``mask`` is boolean, True = attendable.

    Masked positions get an additive ``MASK_VALUE`` before normalisation and
    are forced to exactly 0 afterwards.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if x.shape[x.ndim - mask.ndim:] != mask.shape:
            raise ValueError(f"softmax: incompatible shapes {x.shape} and {mask.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: a row is fully masked (no finite entries)")
        x = x + np.where(mask, 0.0, MASK_VALUE)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z, out=z)
    if mask is not None:
        e *= mask
    e /= e.sum(axis=-1, keepdims=True)
    out = e

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), grad_fn)


def layer_norm(a, gamma, beta, eps=1e-5):
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ValueError(f"layer_norm: incompatible shapes {a.shape} and {gamma.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = g * gamma.data
        n = a.shape[-1]
        ga = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                        - xhat * (gx * xhat).sum(-1, keepdims=True))
        return (ga, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _result(out, (a, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(x) into ``x.grad`` for every taped ancestor."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# optimisation


def step_lr(base_lr, epoch, drop_epoch, factor=0.1):
    """Constant learning rate, multiplied by ``factor`` from ``drop_epoch`` on."""
    if drop_epoch is not None and epoch >= drop_epoch:
        return base_lr * factor
    return base_lr


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def optimizer_step(params, state):
    """One AdamW update with weight decay decoupled from the moment estimates.

    Parameters without a gradient are left untouched and counted in
    ``state.skipped``.
    """
    params = list(params)
    if not params:
        return
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            state.skipped += 1
            continue
        key = p.name if p.name is not None else i
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad ** 2
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Thin stateful wrapper around :func:`optimizer_step`."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        optimizer_step(self.params, self.state)
