"""Trainable layers: Inception1D, batch/layer normalisation, attention, encoders."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PE_NORMS = ("scale", "unit", "none")


def lecun_normal(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True)


class Module:
    """Base class: parameters are grad-requiring Tensor attributes, children are
    Module attributes or lists of Modules, buffers are numpy arrays named in
    ``buffer_names``. Traversal follows attribute assignment order.
    """

    buffer_names: tuple = ()
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(m, Module) for m in value):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {path: p.data.copy() for path, p in self.named_parameters()}
        state.update({path: np.array(b, dtype=np.float64) for path, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(expected) + list(buffers) if k not in state]
        if missing:
            raise ConfigError(f"state is missing {len(missing)} entries, first {missing[0]}")
        for path, p in expected.items():
            value = np.asarray(state[path], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{path}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()
        for path in buffers:
            owner, _, attr = path.rpartition(".")
            module = self._resolve(owner)
            setattr(module, attr, np.array(state[path], dtype=np.float64))

    def _resolve(self, path):
        module = self
        for part in path.split(".") if path else []:
            module = module[int(part)] if isinstance(module, list) else getattr(module, part)
        return module


class Dropout(Module):
    def __init__(self, rate, rng):
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return T.dropout(x, self.rate, self.rng, self.training)


class Dense(Module):
    def __init__(self, in_features, out_features, rng):
        self.weight = lecun_normal(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"dense layer expects {self.weight.shape[0]} features, got {x.shape}")
        return T.matmul(x, self.weight) + self.bias


class Conv1D(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng):
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {kernel_size}")
        self.weight = lecun_normal(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias)


class BatchNorm1D(Module):
    """Per-channel batch normalisation with exponential-moving-average statistics."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        channels = self.gamma.shape[0]
        if x.ndim < 2 or x.shape[1] != channels:
            raise DimensionError(f"batchnorm expects {channels} channels, got input shape {x.shape}")
        if not self.training:
            return T.batch_norm(x, self.gamma, self.beta, self.eps, self.running_mean, self.running_var)
        axes = tuple(a for a in range(x.ndim) if a != 1)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * x.data.mean(axis=axes)
        self.running_var = (1.0 - m) * self.running_var + m * x.data.var(axis=axes)
        return T.batch_norm(x, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class InceptionBlock1D(Module):
    """Parallel same-padded convolutions whose SeLU outputs are concatenated,
    then batch-normalised and activated again.
    """

    def __init__(self, in_channels, filters, kernel_sizes, rng):
        self.in_channels = in_channels
        self.streams = [Conv1D(in_channels, filters, k, rng) for k in kernel_sizes]
        self.batchnorm = BatchNorm1D(filters * len(kernel_sizes))

    @property
    def out_channels(self):
        return self.batchnorm.gamma.shape[0]

    def concat_streams(self, x):
        return T.concat([T.selu(conv(x)) for conv in self.streams], axis=-2)

    def forward(self, x):
        unbatched = x.ndim == 2
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise DimensionError(f"inception block expects {self.in_channels} channels, got {x.shape}")
        out = T.selu(self.batchnorm(self.concat_streams(x)))
        return T.reshape(out, out.shape[1:]) if unbatched else out


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention without masking or projection biases."""

    def __init__(self, d_model, heads, rng):
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_model = d_model
        self.W_q = lecun_normal(rng, (d_model, d_model), d_model)
        self.W_k = lecun_normal(rng, (d_model, d_model), d_model)
        self.W_v = lecun_normal(rng, (d_model, d_model), d_model)
        self.W_o = lecun_normal(rng, (d_model, d_model), d_model)
        self.last_weights = None

    @property
    def head_dim(self):
        return self.d_model // self.heads

    def forward(self, x):
        unbatched = x.ndim == 2
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise DimensionError(f"attention expects width {self.d_model}, got input shape {x.shape}")
        batch, length, _ = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return T.transpose(T.reshape(t, (batch, length, h, hd)), (0, 2, 1, 3))

        q = split(T.matmul(x, self.W_q))
        k = split(T.matmul(x, self.W_k))
        v = split(T.matmul(x, self.W_v))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        context = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        out = T.matmul(T.reshape(context, (batch, length, self.d_model)), self.W_o)
        return T.reshape(out, out.shape[1:]) if unbatched else out


def sinusoid_table(length, dim):
    """entry(pos, 2i) = sin(pos / 10000^(2i/dim)), entry(pos, 2i+1) = cos(same)."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    pairs = np.arange(0, dim, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, pairs / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


class PositionalEncoding(Module):
    """Fixed sinusoidal encoding added to a length x dim sequence.

    ``norm`` selects how the table is tamed before addition: ``scale``
    multiplies it by ``scale``, ``unit`` rescales each row to unit L2 norm and
    ``none`` disables the encoding.
    """

    def __init__(self, length, dim, scale=0.1, norm="scale"):
        if norm not in PE_NORMS:
            raise ConfigError(f"pe_norm must be one of {PE_NORMS}, got {norm!r}")
        self.length = length
        self.dim = dim
        self.scale = scale
        self.norm = norm
        self.table = sinusoid_table(length, dim)
        if norm == "scale":
            self.encoded = self.table * scale
        elif norm == "unit":
            self.encoded = self.table / np.linalg.norm(self.table, axis=1, keepdims=True)
        else:
            self.encoded = np.zeros_like(self.table)

    def forward(self, x):
        if x.shape[-2:] != (self.length, self.dim):
            raise DimensionError(
                f"positional encoding is {self.length}x{self.dim}, input is {x.shape}")
        if self.norm == "none":
            return x
        return x + self.encoded


def positional_encode(x, pe):
    return pe(x)


class FeedForward(Module):
    def __init__(self, d_model, expansion, rng):
        self.expand = Dense(d_model, d_model * expansion, rng)
        self.project = Dense(d_model * expansion, d_model, rng)

    def forward(self, x):
        return self.project(T.selu(self.expand(x)))


class TransformerEncoderBlock(Module):
    """Post-norm encoder: h = norm1(x + attn(x)); out = norm2(h + ffn(h))."""

    def __init__(self, d_model, heads, ff_expansion, dropout, rng, dropout_rng):
        self.attention = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ff_expansion, rng)
        self.norm2 = LayerNorm(d_model)
        self.dropout = Dropout(dropout, dropout_rng)

    def forward(self, x):
        h = self.norm1(x + self.dropout(self.attention(x)))
        return self.norm2(h + self.dropout(self.ffn(h)))
