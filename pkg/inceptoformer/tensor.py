"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its value with numpy. When a :class:`Tape` is active and
any input requires a gradient, the op records a node whose closure maps the
output gradient to the input gradients. :func:`backward` replays the tape in
reverse recording order.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    LabelIndexError,
    NumericalInstabilityError,
)

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

# Stack of active tapes; ``None`` entries come from no_grad().
_TAPES: list = []


class Tensor:
    """A dense row-major float64 array with an optional gradient.

    Leaves (tensors not produced by a recorded op) always receive their
    gradient on backward. Intermediate results keep theirs only when
    ``retain_grad`` is set.
    """

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_tape")

    def __init__(self, data, requires_grad=False, retain_grad=False):
        data = np.array(data, dtype=np.float64)
        if 0 in data.shape:
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retain_grad = retain_grad
        self._tape = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        out.requires_grad = requires_grad
        out.grad = None
        out.retain_grad = False
        out._tape = None
        return out

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
        return self.data.copy()

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of the differentiable ops run while it is active."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))
        output._tape = self

    def is_topological(self):
        """True when every node's inputs were produced before the node."""
        position = {}
        for i, node in enumerate(self.nodes):
            for t in node.inputs:
                if position.get(id(t), -1) >= i:
                    return False
            position[id(node.output)] = i
        return True

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for evaluation or finite differences."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def active_tape():
    return _TAPES[-1] if _TAPES else None


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64), False)


def _result(op, data, inputs, backward_fn):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need_b:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result("matmul", np.matmul(ad, bd), (a, b), backward)


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_sum(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    kept = _kept_shape(shape, axes)

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return _result("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    kept = _kept_shape(shape, axes)
    n = math.prod(shape[a] for a in axes)

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept) / n, shape).copy(),)

    return _result("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    original = x.shape
    return _result("reshape", out, (x,), lambda g: (g.reshape(original),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def index(x, key):
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _result("index", np.array(x.data[key]), (x,), backward)


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------

def _selu_grad(x):
    return np.where(x > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def selu(x):
    xd = x.data
    out = np.where(xd > 0, SELU_SCALE * xd, SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(xd, 0.0)))
    return _result("selu", out, (x,), lambda g: (g * _selu_grad(xd),))


def _softmax(values, axis):
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    s = _softmax(x.data, axis)
    return _result("softmax", s, (x,),
                   lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {logits.shape}")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise LabelIndexError(f"label {bad} outside [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / batch,)

    return _result("cross_entropy", np.array(loss), (logits,), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout: kept activations are scaled by 1/keep so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Convolution and normalisation
# ---------------------------------------------------------------------------

def conv1d(x, weight, bias=None, padding="same"):
    """1D cross-correlation of ``x`` (B x C_in x T or C_in x T) with zero "same" padding."""
    if padding != "same":
        raise ConfigError(f"unsupported padding {padding!r}")
    if weight.ndim != 3:
        raise DimensionError(f"conv1d weights must be C_out x C_in x K, got {weight.shape}")
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got input shape {x.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    steps = xd.shape[2]
    pad = (k - 1) // 2
    padded = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(padded, k, axis=2)  # B x C_in x T x K
    w = weight.data
    out = np.einsum("bctk,ock->bot", cols, w, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]
    need_x = x.requires_grad
    need_w = weight.requires_grad

    def backward(g):
        g3 = g[None] if squeeze else g
        gx = gw = None
        if need_x:
            gcols = np.einsum("bot,ock->bctk", g3, w, optimize=True)
            gpad = np.zeros(padded.shape)
            for i in range(k):
                gpad[:, :, i:i + steps] += gcols[..., i]
            gx = gpad[:, :, pad:pad + steps]
            if squeeze:
                gx = gx[0]
        if need_w:
            gw = np.einsum("bot,bctk->ock", g3, cols, optimize=True)
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv1d", out[0] if squeeze else out, inputs, backward)


def _normalize(op, x, gamma, beta, norm_axes, param_axis, eps, stats=None):
    xd = x.data
    bshape = [1] * xd.ndim
    bshape[param_axis] = xd.shape[param_axis]
    if gamma.size != xd.shape[param_axis] or beta.size != xd.shape[param_axis]:
        raise DimensionError(f"{op}: {xd.shape[param_axis]} features but gamma {gamma.shape}, beta {beta.shape}")
    gv = gamma.data.reshape(bshape)
    bv = beta.data.reshape(bshape)
    if stats is None:
        mean = xd.mean(axis=norm_axes, keepdims=True)
        var = xd.var(axis=norm_axes, keepdims=True)
    else:
        mean, var = (np.asarray(s, dtype=np.float64).reshape(bshape) for s in stats)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    reduce_axes = tuple(a for a in range(xd.ndim) if a != param_axis)
    n = math.prod(xd.shape[a] for a in norm_axes)

    def backward(g):
        gxhat = g * gv
        if stats is None:
            gx = inv / n * (
                n * gxhat
                - gxhat.sum(axis=norm_axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=norm_axes, keepdims=True)
            )
        else:
            gx = gxhat * inv
        ggamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape)
        gbeta = g.sum(axis=reduce_axes).reshape(beta.shape)
        return gx, ggamma, gbeta

    return _result(op, xhat * gv + bv, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then scale and shift."""
    last = x.ndim - 1
    return _normalize("layer_norm", x, gamma, beta, (last,), last, eps)


def batch_norm(x, gamma, beta, eps=1e-5, running_mean=None, running_var=None):
    """Per-channel normalisation of B x C (x T) input.

    Batch statistics over every axis but the channel axis are used unless
    running statistics are given, in which case the op is a fixed affine map.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"batch_norm expects B x C or B x C x T input, got {x.shape}")
    norm_axes = tuple(a for a in range(x.ndim) if a != 1)
    stats = None
    if running_mean is not None:
        stats = (running_mean, running_var)
    return _normalize("batch_norm", x, gamma, beta, norm_axes, 1, eps, stats)


# ---------------------------------------------------------------------------
# Reverse pass and finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate dloss/dt into ``t.grad`` for every tensor ``loss`` depends on.

    Tensors the loss does not reach keep ``grad = None``; use
    ``gradients`` to read them as zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    refs = {id(loss): loss}
    tape = loss._tape
    if tape is not None:
        for node in reversed(tape.nodes):
            key = id(node.output)
            g = grads.pop(key, None)
            if g is None:
                continue
            refs.pop(key)
            out = node.output
            if out.retain_grad:
                out.grad = g.copy() if out.grad is None else out.grad + g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    refs[k] = t
    for k, g in grads.items():
        t = refs[k]
        t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def gradients(params):
    """Gradients of ``params`` with an unreached tensor counted as zero."""
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    n_parameters: int
    worst_index: int | None = None
    analytic: float = 0.0
    numeric: float = 0.0


def relative_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, 1e-8), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def gradcheck(fn, inputs, eps=1e-5, tolerance=1e-4, seed=0):
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``inputs`` holds tensors or shapes; shapes become standard-normal tensors
    drawn from ``seed``. Every entry of every input is perturbed by +/- eps.
    """
    if eps <= 0:
        raise ConfigError(f"gradcheck eps must be > 0, got {eps}")
    rng = np.random.default_rng(seed)
    params = []
    for item in inputs:
        if isinstance(item, Tensor):
            params.append(item)
        else:
            params.append(Tensor(rng.standard_normal(tuple(item)), requires_grad=True))
    for p in params:
        p.grad = None

    with Tape() as tape:
        out = fn(*params)
        if out.size != 1:
            raise ContractError(f"gradcheck function must return a scalar, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise NumericalInstabilityError("non-finite function value at the base point")
        if out.requires_grad:
            backward(out)
    tape.clear()

    analytic = np.concatenate([g.ravel() for g in gradients(params)])
    bad = np.flatnonzero(~np.isfinite(analytic))
    if bad.size:
        raise NumericalInstabilityError(f"non-finite analytic gradient at parameter {bad[0]}", int(bad[0]))

    numeric = np.empty_like(analytic)
    offset = 0
    with no_grad():
        for p in params:
            for j in range(p.size):
                original = p.data.flat[j]
                p.data.flat[j] = original + eps
                f_plus = fn(*params).item()
                p.data.flat[j] = original - eps
                f_minus = fn(*params).item()
                p.data.flat[j] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericalInstabilityError(
                        f"non-finite function value perturbing parameter {offset + j}", offset + j)
                numeric[offset + j] = (f_plus - f_minus) / (2.0 * eps)
            offset += p.size

    errors = relative_error(analytic, numeric)
    worst = int(errors.argmax()) if errors.size else None
    max_error = float(errors[worst]) if worst is not None else 0.0
    return GradcheckReport(
        max_rel_error=max_error,
        passed=max_error < tolerance,
        n_parameters=int(analytic.size),
        worst_index=worst,
        analytic=float(analytic[worst]) if worst is not None else 0.0,
        numeric=float(numeric[worst]) if worst is not None else 0.0,
    )
