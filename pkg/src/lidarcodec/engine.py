"""Small reverse-mode autodiff over float64 numpy arrays.

Only the primitives the entropy model needs are provided.  Every primitive
checks its output for NaN/Inf.  Reductions on the probability path use a
fixed sequential order (see :func:`exact_affine`).
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def Parameter(data, name):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _make(data, parents, backward_fn, op):
    out = Tensor(_finite(data, op))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise UsageError("backward() needs a scalar loss")
    if not loss.requires_grad or (loss._backward is None and not loss._parents):
        raise UsageError("no recorded computation to differentiate")
    order, seen, stack = [], set(), [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # release the graph so intermediate buffers can be freed
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None


# --- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _t(a), _t(b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _t(a), _t(b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _t(a), _t(b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw, "mul")


def sigmoid(x):
    x = _t(x)
    s = _sigmoid_np(x.data)

    def bw(g):
        _acc(x, g * s * (1.0 - s))
    return _make(s, (x,), bw, "sigmoid")


def silu(x):
    x = _t(x)
    s = _sigmoid_np(x.data)

    def bw(g):
        _acc(x, g * (s + x.data * s * (1.0 - s)))
    return _make(x.data * s, (x,), bw, "silu")


def _sigmoid_np(x):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def silu_np(x):
    return x * _sigmoid_np(x)


def sigmoid_np(x):
    return _sigmoid_np(x)


# --- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = _t(a), _t(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.data.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _acc(b, gb)
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def exact_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` accumulated strictly in input-index order.

    Every output row depends only on its own input row, bit for bit, no
    matter how many rows are evaluated together.  BLAS gives no such
    guarantee (gemv vs gemm kernels), which would break step/scan replay.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x.size // max(x.shape[-1], 1)
    if rows <= 64:
        acc = np.add.reduce(x[..., :, None] * w, axis=-2)
    else:
        acc = x[..., 0, None] * w[0]
        for k in range(1, w.shape[0]):
            acc = acc + x[..., k, None] * w[k]
    return acc if b is None else acc + b


def affine(x, w, b=None, exact=False):
    """Affine map over the last axis; ``exact`` selects :func:`exact_affine`."""
    x, w = _t(x), _t(w)
    parents = (x, w) if b is None else (x, w, _t(b))
    if exact:
        y = exact_affine(x.data, w.data, None if b is None else parents[2].data)
    else:
        y = x.data @ w.data
        if b is not None:
            y = y + parents[2].data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.reshape(-1, x.data.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and parents[2].requires_grad:
            _acc(parents[2], g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _make(y, parents, bw, "affine")


# --- shape ops ---------------------------------------------------------------

def reshape(x, shape):
    x = _t(x)
    old = x.data.shape

    def bw(g):
        _acc(x, g.reshape(old))
    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes):
    x = _t(x)
    inv = np.argsort(axes)

    def bw(g):
        _acc(x, np.transpose(g, inv))
    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def concat(xs, axis=-1):
    xs = [_t(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            _acc(x, part)
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def embed(table, index):
    """Row lookup; ``index`` may have any integer shape."""
    table = _t(table)
    idx = np.asarray(index, dtype=np.int64)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index outside [0, {n})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _acc(table, gt)
    return _make(table.data[idx], (table,), bw, "embed")


gather_rows = embed


def max_over(x, axis):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    x = _t(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _acc(x, gx)
    return _make(out, (x,), bw, "max")


def neighbor_max(x, neighbors):
    """Channel-wise max of ``x`` rows over each row's neighbor list."""
    return max_over(gather_rows(x, neighbors), axis=1)


def pick(x, index):
    """``x[i, index[i]]`` for a 2-D ``x``."""
    x = _t(x)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(len(idx))

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _acc(x, gx)
    return _make(x.data[rows, idx], (x,), bw, "pick")


# --- reductions / normalisation ----------------------------------------------

def sum_all(x):
    x = _t(x)

    def bw(g):
        _acc(x, np.broadcast_to(g, x.data.shape))
    return _make(np.sum(x.data), (x,), bw, "sum")


def mean_all(x):
    x = _t(x)
    n = x.data.size

    def bw(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape))
    return _make(np.sum(x.data) / n, (x,), bw, "mean")


def softmax_np(z, axis=-1):
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    x = _t(x)
    p = softmax_np(x.data, axis)

    def bw(g):
        _acc(x, p * (g - np.sum(g * p, axis=axis, keepdims=True)))
    return _make(p, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _acc(x, g - np.exp(out) * np.sum(g, axis=axis, keepdims=True))
    return _make(out, (x,), bw, "log_softmax")


LN_EPS = 1e-12


def layer_norm_np(x, gamma=None, beta=None, eps=LN_EPS):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    y = xc / np.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma + beta
    return y


def layer_norm(x, gamma=None, beta=None, eps=LN_EPS):
    x = _t(x)
    parents = (x,) if gamma is None else (x, _t(gamma), _t(beta))
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat if gamma is None else xhat * parents[1].data + parents[2].data

    def bw(g):
        if gamma is not None:
            flat_g = g.reshape(-1, g.shape[-1])
            _acc(parents[1], np.sum(flat_g * xhat.reshape(flat_g.shape), axis=0))
            _acc(parents[2], np.sum(flat_g, axis=0))
            g = g * parents[1].data
        if x.requires_grad:
            d = x.data.shape[-1]
            gx = inv / d * (d * g - np.sum(g, axis=-1, keepdims=True)
                            - xhat * np.sum(g * xhat, axis=-1, keepdims=True))
            _acc(x, gx)
    return _make(y, parents, bw, "layer_norm")


# --- recurrence --------------------------------------------------------------

def scan_np(decay: np.ndarray, inp: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """``h_t = decay_t * h_{t-1} + inp_t`` along axis -2 (time), ``h_0 = 0``."""
    T = decay.shape[-2]
    out = np.empty_like(inp)
    h = np.zeros(inp.shape[:-2] + inp.shape[-1:]) if h0 is None else h0
    for t in range(T):
        h = decay[..., t, :] * h + inp[..., t, :]
        out[..., t, :] = h
    return out


def scan(decay, inp):
    """Differentiable first-order linear recurrence (see :func:`scan_np`)."""
    decay, inp = _t(decay), _t(inp)
    H = scan_np(decay.data, inp.data)

    def bw(g):
        T = g.shape[-2]
        gd = np.empty_like(g)
        gu = np.empty_like(g)
        carry = np.zeros(g.shape[:-2] + g.shape[-1:])
        for t in range(T - 1, -1, -1):
            carry = g[..., t, :] + carry
            gu[..., t, :] = carry
            prev = H[..., t - 1, :] if t > 0 else 0.0
            gd[..., t, :] = carry * prev
            carry = carry * decay.data[..., t, :]
        _acc(decay, gd)
        _acc(inp, gu)
    return _make(H, (decay, inp), bw, "scan")


# --- optimisation ------------------------------------------------------------

def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """Adaptive moments with weight decay applied directly to the weights."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
