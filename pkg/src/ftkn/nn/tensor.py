"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything the refinement pipeline needs is built from the small op set
below: broadcast arithmetic, 2-D matmul, row softmax, layer norm, channel
max-pool, row gather/concat and a few fused loss nodes. Each op records a
backward closure; `Tensor.backward()` replays them in reverse topological
order. Arrays are always float64 and C-contiguous, so forward passes are
bit-reproducible for a fixed seed and config.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""


class ShapeError(ValueError):
    """Operands have non-conforming shapes."""


_STATE = threading.local()


def _counters():
    stack = getattr(_STATE, "counters", None)
    if stack is None:
        stack = []
        _STATE.counters = stack
    return stack


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside build no backward graph."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class finite_checks:
    """Toggle the per-op NaN/Inf guard (default on)."""

    def __init__(self, enabled):
        self.enabled = enabled

    def __enter__(self):
        self._prev = getattr(_STATE, "finite_checks", True)
        _STATE.finite_checks = self.enabled
        return self

    def __exit__(self, *exc):
        _STATE.finite_checks = self._prev
        return False


def _check_finite(arr):
    if getattr(_STATE, "finite_checks", True) and not np.isfinite(arr).all():
        raise NonFiniteError("non-finite values in tensor of shape %s" % (arr.shape,))


class OpCounter:
    """Tallies work done while active: multiply-accumulates, attention
    score evaluations (query x key pairs per head) and the peak number of
    simultaneously live tensor values. All three are monotone during a
    forward pass; `peak_live_values` relies on CPython refcounting."""

    def __init__(self):
        self.mul_adds = 0
        self.attention_cells = 0
        self.peak_live_values = 0
        self._live = 0
        self._lock = threading.Lock()

    def __enter__(self):
        _counters().append(self)
        return self

    def __exit__(self, *exc):
        _counters().remove(self)
        return False

    def add_mul_adds(self, n):
        with self._lock:
            self.mul_adds += int(n)

    def add_attention_cells(self, n):
        with self._lock:
            self.attention_cells += int(n)

    def _on_alloc(self, n):
        with self._lock:
            self._live += n
            if self._live > self.peak_live_values:
                self.peak_live_values = self._live

    def _on_free(self, n):
        with self._lock:
            self._live -= n


def count_mul_adds(n):
    for c in _counters():
        c.add_mul_adds(n)


def count_attention_cells(n):
    for c in _counters():
        c.add_attention_cells(n)


def _track_allocation(tensor):
    active = list(_counters())
    if not active:
        return
    n = tensor.data.size
    for c in active:
        c._on_alloc(n)

    def _release(counters=active, size=n):
        for c in counters:
            c._on_free(size)

    weakref.finalize(tensor, _release)


class Tensor:
    """A float64 array plus optional gradient buffer and backward hook."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.grad = None
        self._backward = None
        self._parents = ()
        _track_allocation(self)

    # -- plumbing ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        _check_finite(g)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def transpose(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- primitive ops -----------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    count_mul_adds(data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    count_mul_adds(data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul needs (N,K)@(K,M), got %s @ %s" % (a.shape, b.shape))
    data = a.data @ b.data
    count_mul_adds(a.data.shape[0] * a.data.shape[1] * b.data.shape[1])

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a):
    data = np.ascontiguousarray(a.data.T)

    def backward(g):
        a._accumulate(g.T)

    return _make(data, (a,), backward)


def relu(a):
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), backward)


def sigmoid(a):
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def sum_all(a):
    data = np.array(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _make(data, (a,), backward)


def mean_all(a):
    n = a.data.size
    data = np.array(a.data.sum() / n)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).astype(np.float64))

    return _make(data, (a,), backward)


def gather_rows(a, idx):
    """Row selection out[i, :] = a[idx[i], :]; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows wants a 1-D index vector")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("gather index out of range")
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(data, (a,), backward)


def concat_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make(data, parts, backward)


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make(data, parts, backward)


def slice_cols(a, start, stop):
    data = np.ascontiguousarray(a.data[:, start:stop])

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make(data, (a,), backward)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


# -- fused ops ---------------------------------------------------------


def softmax_rows(a):
    """Row-wise softmax, stabilized by row-max subtraction."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    count_mul_adds(2 * p.size)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        a._accumulate(p * (g - dot))

    return _make(p, (a,), backward)


def masked_softmax_rows(scores, gate):
    """Softmax over rows with multiplicative key gates.

    p_ij = gate_j * exp(s_ij - m_i) / sum_k gate_k * exp(s_ik - m_i).
    `gate` is a length-Nk tensor in [0, 1]; gradient flows to both the
    scores and the gates, which is what straight-through token masks need.
    Rows where every gate is zero are an error.
    """
    g_row = gate.data.reshape(1, -1)
    if g_row.shape[1] != scores.data.shape[1]:
        raise ShapeError("gate length must match key count")
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    num = e * g_row
    z = num.sum(axis=1, keepdims=True)
    if np.any(z <= 0.0):
        raise ShapeError("a softmax row has no unmasked keys")
    p = num / z
    count_mul_adds(3 * p.size)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        if scores.requires_grad:
            scores._accumulate(p * (g - dot))
        if gate.requires_grad:
            gate._accumulate((((g - dot) * e / z)).sum(axis=0).reshape(gate.data.shape))

    return _make(p, (scores, gate), backward)


def layer_norm_rows(a, gain, shift, eps=1e-5):
    """Per-row standardization followed by a learned affine map."""
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + shift.data
    count_mul_adds(3 * data.size)
    n = a.data.shape[1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            a._accumulate(
                inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            )
            count_mul_adds(4 * g.size)

    return _make(data, (a, gain, shift), backward)


def max_over_rows(a):
    """Channel-wise max over the row axis of a (K, D) tensor.

    Returns a (1, D) tensor; backward routes the gradient to the first
    row attaining each channel max, so gradients are deterministic.
    """
    if a.data.shape[0] < 1:
        raise ShapeError("max_over_rows needs at least one row")
    argmax = a.data.argmax(axis=0)  # first occurrence on ties
    data = a.data[argmax, np.arange(a.data.shape[1])].reshape(1, -1)

    def backward(g):
        full = np.zeros_like(a.data)
        full[argmax, np.arange(a.data.shape[1])] = g.reshape(-1)
        a._accumulate(full)

    return _make(data, (a,), backward)


def straight_through(soft, hard_data):
    """Forward the hard values, backpropagate as if they were `soft`."""
    hard = np.asarray(hard_data, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise ShapeError("hard/soft shape mismatch")

    def backward(g):
        soft._accumulate(g)

    return _make(hard, (soft,), backward)


def bce_with_logits(logit, target):
    """Binary cross entropy on raw logits, numerically stable, mean-reduced."""
    t = np.asarray(target, dtype=np.float64)
    z = logit.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    data = np.array(loss.mean())
    n = z.size

    def backward(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ex = np.exp(z[~pos])
        p[~pos] = ex / (1.0 + ex)
        logit._accumulate(g * (p - t) / n)

    return _make(data, (logit,), backward)


def smooth_l1(pred, target, delta=1.0):
    """Huber loss against a constant target, mean over elements."""
    t = np.asarray(target, dtype=np.float64)
    d = pred.data - t
    ad = np.abs(d)
    quad = ad <= delta
    loss = np.where(quad, 0.5 * d**2 / delta, ad - 0.5 * delta)
    data = np.array(loss.mean())
    n = d.size

    def backward(g):
        grad = np.where(quad, d / delta, np.sign(d))
        pred._accumulate(g * grad / n)

    return _make(data, (pred,), backward)
