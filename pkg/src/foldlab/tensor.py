"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every tensor produced by a primitive records its parents and a backward
closure; node ids are strictly increasing, so reverse traversal in
decreasing id order is a valid topological order for the DAG built during
the forward pass. Everything is float64 so finite-difference checks are
meaningful.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_ids = itertools.count()

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
RMS_EPS = 1e-6


class Tensor:
    """A dense float64 array plus its record on the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 0 and 0 in self.data.shape:
            raise ValueError(f"{op}: zero-sized extent in shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._id = next(_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """A tensor that never receives gradients."""
    return Tensor(x, requires_grad=False)


def _track(parents):
    return any(p.requires_grad for p in parents)


def _make(data, op, parents, backward):
    if _track(parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), bwd)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.data * c, "scale", (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(orig),)

    return _make(out, "reshape", (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), "transpose", (a,), bwd)


def narrow(a, axis, start, size):
    """Contiguous slice of `size` elements along `axis`."""
    a = as_tensor(a)
    if start < 0 or start + size > a.shape[axis]:
        raise ValueError(f"narrow: slice [{start}:{start + size}] exceeds axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)

    def bwd(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], "narrow", (a,), bwd)


def softmax(a):
    """Row softmax over the last axis. -inf entries yield exact zeros."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), bwd)


def rms_norm(x, gain, eps=RMS_EPS):
    """RMS normalization over the last axis with a learnable per-channel scale."""
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ValueError(f"rms_norm: gain shape {gain.shape} does not match channels {d}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r
    out = normed * gain.data

    def bwd(g):
        g_gain = (g * normed).reshape(-1, d).sum(axis=0)
        gw = g * gain.data
        dot = (gw * x.data).sum(axis=-1, keepdims=True)
        g_x = r * gw - (r**3 / d) * x.data * dot
        return g_x, g_gain

    return _make(out, "rms_norm", (x, gain), bwd)


def gelu(x):
    """tanh-approximation GELU."""
    x = as_tensor(x)
    u = _SQRT_2_OVER_PI * (x.data + _GELU_C * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, "gelu", (x,), bwd)


def embedding(table, ids):
    """Row lookup: table (V, d), ids integer array -> (*ids.shape, d)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        bad = np.argwhere((ids < 0) | (ids >= table.shape[0]))[0]
        raise ValueError(f"embedding: id out of range at position {tuple(bad)}")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, "embedding", (table,), bwd)


def cross_entropy(logits, targets):
    """Mean next-token cross-entropy. logits (N, V), targets (N,) ints."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: shapes {logits.shape} and {targets.shape} do not conform")
    n, v = logits.shape
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError(f"cross_entropy: target out of range at position {int(np.argmax(targets >= v))}")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    out = (lse - logits.data[np.arange(n), targets]).mean()

    def bwd(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return _make(out, "cross_entropy", (logits,), bwd)


def log(a):
    a = as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), "log", (a,), bwd)


def sum_all(a):
    a = as_tensor(a)

    def bwd(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(), "sum_all", (a,), bwd)


def mean_all(a):
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def gate(alpha, eps, exact_grad=True):
    """Smoothed-L0 gate g(x) = x^2 / (x^2 + eps), elementwise.

    exact_grad=False switches the backward rule to the modified
    2*x*eps / (x^2 + eps) variant for comparison runs.
    """
    alpha = as_tensor(alpha)
    if eps <= 0:
        raise ValueError(f"gate: eps must be positive, got {eps}")
    denom = alpha.data**2 + eps
    out = alpha.data**2 / denom

    def bwd(g):
        if exact_grad:
            return (g * 2.0 * alpha.data * eps / denom**2,)
        return (g * 2.0 * alpha.data * eps / denom,)

    return _make(out, "gate", (alpha,), bwd)


def kl_rows(p, q):
    """Mean over rows of KL(p || q), rows along the last axis.

    p is a constant distribution array; entries where p == 0 contribute
    nothing (and receive no gradient), which makes causally masked rows
    safe.
    """
    q = as_tensor(q)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_rows: shapes {p.shape} and {q.shape} differ")
    n_rows = int(np.prod(p.shape[:-1]))
    mask = p > 0
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q.data[mask])))) / n_rows

    def bwd(g):
        gq = np.zeros(q.shape)
        gq[mask] = -p[mask] / q.data[mask]
        return (g * gq / n_rows,)

    return _make(val, "kl_rows", (q,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Accumulates `.grad` on every requires_grad leaf reachable from the loss
    and returns the {id: gradient array} map for all visited nodes.
    Unreachable leaves simply keep grad None (treated as zero).
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    # collect reachable differentiable subgraph
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or not t.requires_grad:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)

    grads = {loss._id: np.ones(())}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:  # leaf
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return grads


def grad_of(loss, params):
    """Gradients of a scalar loss for a list of leaf tensors (zeros if unreachable)."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def grad_check(fn, params, step=1e-5):
    """Max relative error between analytic gradients and central differences.

    fn() must rebuild the scalar loss from the current contents of
    `params`. The error is |analytic - fd| / max(1, |fd|), maximized over
    every parameter element.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    analytic = grad_of(fn(), params)
    worst = 0.0
    for idx, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = fn().item()
            flat[j] = orig - step
            down = fn().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite value at parameter {idx}, element {j}")
            fd = (up - down) / (2.0 * step)
            worst = max(worst, abs(ga[j] - fd) / max(1.0, abs(fd)))
    return worst
