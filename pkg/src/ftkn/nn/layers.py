"""Layers used by the refinement network.

All layers are thin wrappers over the autodiff primitives in
:mod:`ftkn.nn.tensor`; parameters are float64 and initialized from an
explicit numpy Generator so models are reproducible by seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_FILL = -1e9  # additive bias applied to padded key columns


class ConfigError(ValueError):
    """Invalid layer or pipeline configuration."""


class Parameter:
    """A named, trainable tensor."""

    __slots__ = ("name", "tensor", "init_scheme")

    def __init__(self, name, shape, init_scheme, rng=None):
        if init_scheme == "uniform-fan-in":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif init_scheme == "zeros":
            data = np.zeros(shape)
        elif init_scheme == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError("unknown init scheme %r" % (init_scheme,))
        self.name = name
        self.init_scheme = init_scheme
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None


class Module:
    """Base class: collects Parameters from attributes recursively."""

    def parameters(self):
        out = []
        seen = set()
        for value in self.__dict__.values():
            _collect(value, seen, out)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _collect(value, seen, out):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            out.append(value)
    elif isinstance(value, Module):
        for v in value.__dict__.values():
            _collect(v, seen, out)
    elif isinstance(value, (list, tuple)):
        for v in value:
            _collect(v, seen, out)
    elif isinstance(value, dict):
        for v in value.values():
            _collect(v, seen, out)


class Linear(Module):
    def __init__(self, dim_in, dim_out, rng, name="linear", bias=True,
                 init="uniform-fan-in"):
        self.weight = Parameter(name + ".weight", (dim_in, dim_out), init, rng)
        self.bias = Parameter(name + ".bias", (dim_out,), "zeros") if bias else None

    def __call__(self, x):
        if x.data.shape[1] != self.weight.data.shape[0]:
            raise ShapeError(
                "linear: input has %d features, weight expects %d"
                % (x.data.shape[1], self.weight.data.shape[0])
            )
        y = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = T.add(y, self.bias.tensor)
        return y


class MLP(Module):
    """Two-layer perceptron with ReLU, the pointwise map of the embeddings.

    With `skip=True` a bias-free linear path is added to the output, so
    raw input statistics stay linearly readable downstream instead of
    having to be recovered through the ReLU bottleneck.
    """

    def __init__(self, dim_in, dim_hidden, dim_out, rng, name="mlp",
                 skip=False):
        self.fc1 = Linear(dim_in, dim_hidden, rng, name + ".fc1")
        self.fc2 = Linear(dim_hidden, dim_out, rng, name + ".fc2")
        self.skip = (Linear(dim_in, dim_out, rng, name + ".skip", bias=False)
                     if skip else None)

    def __call__(self, x):
        out = self.fc2(T.relu(self.fc1(x)))
        if self.skip is not None:
            out = T.add(out, self.skip(x))
        return out


class LayerNorm(Module):
    def __init__(self, dim, name="norm", eps=1e-5):
        self.gain = Parameter(name + ".gain", (dim,), "ones")
        self.shift = Parameter(name + ".shift", (dim,), "zeros")
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm_rows(x, self.gain.tensor, self.shift.tensor, self.eps)


class FeedForward(Module):
    """Position-wise FFN, hidden width 2x the model dim."""

    def __init__(self, dim, rng, name="ffn"):
        self.fc1 = Linear(dim, 2 * dim, rng, name + ".fc1")
        self.fc2 = Linear(2 * dim, dim, rng, name + ".fc2")

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


def key_mask_bias(valid_mask):
    """(1, Nk) additive bias: 0 for valid keys, MASK_FILL for padded ones."""
    bias = np.where(np.asarray(valid_mask, dtype=bool), 0.0, MASK_FILL)
    return Tensor(bias.reshape(1, -1))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    Returns both the projected output and the per-head attention maps;
    the maps drive token scoring downstream, so they are first-class
    outputs rather than an internal detail.
    """

    def __init__(self, dim, heads, rng, name="mhsa"):
        if dim % heads != 0:
            raise ConfigError("model dim %d not divisible by %d heads" % (dim, heads))
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng, name + ".q")
        self.k_proj = Linear(dim, dim, rng, name + ".k")
        self.v_proj = Linear(dim, dim, rng, name + ".v")
        self.out_proj = Linear(dim, dim, rng, name + ".out")

    def head_values(self, k_in, v_in):
        """Per-head key/value projections, reusable across gather variants."""
        k = self.k_proj(k_in)
        v = self.v_proj(v_in)
        ks = [T.slice_cols(k, h * self.head_dim, (h + 1) * self.head_dim) for h in range(self.heads)]
        vs = [T.slice_cols(v, h * self.head_dim, (h + 1) * self.head_dim) for h in range(self.heads)]
        return ks, vs

    def attention_maps(self, q_in, ks, key_mask=None, key_gate=None):
        """One row-stochastic (Nq, Nk) map per head."""
        nq, nk = q_in.data.shape[0], ks[0].data.shape[0]
        q = self.q_proj(q_in)
        scale = 1.0 / math.sqrt(self.head_dim)
        bias = key_mask_bias(key_mask) if key_mask is not None else None
        maps = []
        for h in range(self.heads):
            qh = T.slice_cols(q, h * self.head_dim, (h + 1) * self.head_dim)
            scores = T.mul(T.matmul(qh, T.transpose(ks[h])), scale)
            if bias is not None:
                scores = T.add(scores, bias)
            if key_gate is not None:
                maps.append(T.masked_softmax_rows(scores, key_gate))
            else:
                maps.append(T.softmax_rows(scores))
        T.count_attention_cells(self.heads * nq * nk)
        return maps

    def combine(self, maps, vs):
        """Concat per-head map @ value products and apply the output projection."""
        outs = [T.matmul(m, v) for m, v in zip(maps, vs)]
        return self.out_proj(T.concat_cols(outs))

    def __call__(self, q_in, k_in, v_in, key_mask=None, key_gate=None):
        ks, vs = self.head_values(k_in, v_in)
        maps = self.attention_maps(q_in, ks, key_mask=key_mask, key_gate=key_gate)
        return self.combine(maps, vs), maps


def softmax_rows(x):
    """Row softmax on a 2-D tensor (re-export for callers outside nn)."""
    return T.softmax_rows(x)


def max_pool_seq(x):
    """Channel-wise max over a (K, D) sequence.

    Returns the pooled (1, D) tensor and the argmax row per channel
    (first occurrence on ties, which fixes the backward routing).
    """
    pooled = T.max_over_rows(x)
    argmax = x.data.argmax(axis=0)
    return pooled, argmax
