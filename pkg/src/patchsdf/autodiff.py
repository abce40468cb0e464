"""A small reverse-mode autodiff engine on numpy arrays.

Only the operations the point-set network needs are provided. Every
operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_kink_log = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken at every non-smooth operation (relu, abs, max).

    Two evaluations with equal kink records lie on the same smooth piece of
    the function, which is what a finite-difference check needs.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topological_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(a):
    mask = a.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _logistic(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _logistic(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def absolute(a):
    sign = np.sign(a.data)
    if _kink_log is not None:
        _kink_log.append(sign)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None):
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def channel_max(a, axis=-2):
    """Maximum over a set axis; the gradient goes to the first maximal entry only."""
    axis = axis % a.ndim
    need_arg = (_grad_enabled and a.requires_grad) or _kink_log is not None
    if not need_arg:
        return Tensor(a.data.max(axis=axis))
    # argmax along the last axis of a contiguous copy is much faster than along a middle axis
    moved = np.ascontiguousarray(np.moveaxis(a.data, axis, -1))
    arg = np.argmax(moved, axis=-1)
    if _kink_log is not None:
        _kink_log.append(arg)
    out = np.take_along_axis(moved, arg[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(moved)
        np.put_along_axis(full, arg[..., None], g[..., None], axis=-1)
        return (np.moveaxis(full, -1, axis),)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# layers


def matmul(x, w):
    """(..., I) @ (I, O) -> (..., O)."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ValueError(f"shape mismatch: {x.shape} @ {w.shape}")

    x2 = x.data.reshape(-1, x.shape[-1])
    out_shape = x.shape[:-1] + (w.shape[1],)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

    return _make((x2 @ w.data).reshape(out_shape), (x, w), back)


def dense(x, w, b=None):
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[1]):
        raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradient)."""

    def __init__(self, channels, momentum=0.9):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training=True, eps=1e-5):
    """Normalize each channel (last axis) over every other axis."""
    c = x.shape[-1]
    if training:
        flat = x.data.reshape(-1, c)
        if len(flat) < 2:
            raise ValueError("batch norm in training mode needs at least 2 samples per channel")
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * var
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gflat = g.reshape(-1, c)
        hflat = xhat.reshape(-1, c)
        dgamma = (gflat * hflat).sum(axis=0)
        dbeta = gflat.sum(axis=0)
        gh = gflat * gamma.data
        if training:
            n = len(gflat)
            dx = inv / n * (n * gh - gh.sum(axis=0) - hflat * (gh * hflat).sum(axis=0))
        else:
            dx = gh * inv
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(out, (x, gamma, beta), back)


def quaternion_rotate(q, pts):
    """Rotate point sets by normalized quaternions (w, x, y, z).

    ``q`` is (4,) or (B, 4); ``pts`` is (N, 3) or (B, N, 3) correspondingly.
    """
    q, pts = _wrap(q), _wrap(pts)
    qd = q.data
    norm = np.linalg.norm(qd, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("quaternion norm below 1e-12")
    u = qd / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)  # (..., 3, 3)
    p = pts.data
    out = p @ np.swapaxes(R, -1, -2)

    def back(g):
        gp = g @ R
        # dL/dR[i, j] = sum_n g[n, i] p[n, j]
        gR = np.swapaxes(g, -1, -2) @ p
        r00, r01, r02 = gR[..., 0, 0], gR[..., 0, 1], gR[..., 0, 2]
        r10, r11, r12 = gR[..., 1, 0], gR[..., 1, 1], gR[..., 1, 2]
        r20, r21, r22 = gR[..., 2, 0], gR[..., 2, 1], gR[..., 2, 2]
        gw = 2 * (-z * r01 + y * r02 + z * r10 - x * r12 - y * r20 + x * r21)
        gx = 2 * (y * r01 + z * r02 + y * r10 - 2 * x * r11 - w * r12 + z * r20 + w * r21 - 2 * x * r22)
        gy = 2 * (-2 * y * r00 + x * r01 + w * r02 + x * r10 + z * r12 - w * r20 + z * r21 - 2 * y * r22)
        gz = 2 * (-2 * z * r00 - w * r01 + x * r02 + w * r10 - 2 * z * r11 + y * r12 + x * r20 + y * r21)
        gu = np.stack([gw, gx, gy, gz], -1)
        # through u = q / |q|
        gq = (gu - u * np.sum(gu * u, axis=-1, keepdims=True)) / norm
        return gq, gp

    return _make(out, (q, pts), back)


def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy of logistic(logits) against 0/1 targets."""
    z = logits.data
    y = np.asarray(targets, dtype=DTYPE)
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (logits,), lambda g: (g * (_logistic(z) - y),))


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class Adam:
    """Adam with bias correction, over a dict of named parameters."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update on plain arrays.

    ``state`` holds ``t``, ``m`` and ``v`` (dicts keyed like ``params``) and
    is updated in place; the updated parameters are returned as a new dict.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.setdefault("t", 0)
    state.setdefault("m", {k: np.zeros_like(v) for k, v in params.items()})
    state.setdefault("v", {k: np.zeros_like(v) for k, v in params.items()})
    state["t"] += 1
    t = state["t"]
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name] = beta1 * state["m"][name] + (1 - beta1) * g
        v = state["v"][name] = beta2 * state["v"][name] + (1 - beta2) * g * g
        out[name] = p - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    return out
