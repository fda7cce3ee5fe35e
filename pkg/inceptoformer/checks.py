"""Finite-difference gradient checks for every layer type and a tiny full model.

Each check builds its layer from a fixed seed, feeds a random input and
reduces the output to a scalar with a random weighting so that no output
gradient cancels by symmetry. Dropout is off and batch normalisation runs
on fixed statistics unless the check name says otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalInstabilityError
from .layers import Dense, FeedForward, InceptionBlock1D, LayerNorm, MultiHeadAttention, TransformerEncoderBlock
from .model import ModelConfig, build
from .tensor import Tensor

log = logging.getLogger(__name__)

TINY_CONFIG = ModelConfig(
    n_signals=2,
    segment_len=10,
    filters_per_stream=4,
    reduced_dim=4,
    classifier_widths=(8, 8),
    dropout=0.0,
)


@dataclass
class CheckResult:
    name: str
    report: T.GradcheckReport | None
    error: str | None = None

    @property
    def passed(self):
        return self.error is None and self.report is not None and self.report.passed

    def line(self):
        """Machine-readable one-line summary."""
        if self.report is None:
            return f"[GRADCHECK] check={self.name} status=ERROR error={self.error!r}"
        r = self.report
        status = "PASS" if self.passed else "FAIL"
        text = (f"[GRADCHECK] check={self.name} max_rel_error={r.max_rel_error:.3e} "
                f"n_parameters={r.n_parameters} status={status}")
        if not self.passed:
            text += f" parameter_index={r.worst_index} analytic={r.analytic:.9e} numeric={r.numeric:.9e}"
        return text


def _weighted(out, rng):
    weights = rng.standard_normal(out.shape)
    return T.reduce_sum(out * weights)


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _module_check(module, x):
    """fn(x, *params) evaluating ``module`` with its parameters swapped in."""
    params = module.parameters()
    weights = np.random.default_rng(7).standard_normal(module(x).shape)

    def fn(inp, *_):
        return T.reduce_sum(module(inp) * weights)

    return fn, [x, *params]


def _conv(kernel):
    def make(rng):
        x, w, b = _leaf(rng, (2, 2, 7)), _leaf(rng, (3, 2, kernel)), _leaf(rng, (3,))
        return lambda x, w, b: _weighted(T.conv1d(x, w, b), np.random.default_rng(1)), [x, w, b]
    return make


def _batchnorm(training):
    def make(rng):
        x, gamma, beta = _leaf(rng, (4, 3, 5)), _leaf(rng, (3,)), _leaf(rng, (3,))
        mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        if training:
            def fn(x, g, b):
                return _weighted(T.batch_norm(x, g, b), np.random.default_rng(1))
        else:
            def fn(x, g, b):
                return _weighted(T.batch_norm(x, g, b, 1e-5, mean, var), np.random.default_rng(1))
        return fn, [x, gamma, beta]
    return make


def _elementwise(op):
    def make(rng):
        x = _leaf(rng, (3, 5))
        return lambda x: _weighted(op(x), np.random.default_rng(1)), [x]
    return make


def _cross_entropy(rng):
    logits = _leaf(rng, (5, 4))
    labels = np.array([0, 3, 1, 2, 3])
    return lambda z: T.cross_entropy(z, labels), [logits]


def _dense(rng):
    return _module_check(Dense(5, 3, rng), _leaf(rng, (4, 5)))


def _attention(rng):
    return _module_check(MultiHeadAttention(4, 2, rng), _leaf(rng, (2, 3, 4)))


def _feed_forward(rng):
    return _module_check(FeedForward(4, 4, rng), _leaf(rng, (2, 3, 4)))


def _layer_norm(rng):
    norm = LayerNorm(5)
    norm.gamma.data = rng.standard_normal(5)
    norm.beta.data = rng.standard_normal(5)
    return _module_check(norm, _leaf(rng, (3, 5)))


def _transformer_block(rng):
    block = TransformerEncoderBlock(4, 2, 4, 0.0, rng, np.random.default_rng(0))
    return _module_check(block.eval(), _leaf(rng, (2, 3, 4)))


def _inception_block(rng):
    block = InceptionBlock1D(2, 2, (1, 3, 5), rng)
    block.batchnorm.running_mean = rng.standard_normal(6)
    block.batchnorm.running_var = rng.uniform(0.5, 2.0, 6)
    return _module_check(block.eval(), _leaf(rng, (2, 2, 8)))


def _tiny_model(rng):
    model = build(TINY_CONFIG, seed=0).eval()
    x = Tensor(rng.standard_normal((2, TINY_CONFIG.n_signals, TINY_CONFIG.segment_len)), requires_grad=True)
    labels = np.array([0, 3])

    def fn(inp, *_):
        return T.cross_entropy(model(inp), labels)

    return fn, [x, *model.parameters()]


CHECKS = {
    "conv1d_k1": _conv(1),
    "conv1d_k3": _conv(3),
    "conv1d_k5": _conv(5),
    "batchnorm_eval": _batchnorm(False),
    "batchnorm_train": _batchnorm(True),
    "dense": _dense,
    "selu": _elementwise(T.selu),
    "softmax": _elementwise(lambda x: T.softmax(x, axis=-1)),
    "cross_entropy": _cross_entropy,
    "attention": _attention,
    "feed_forward": _feed_forward,
    "layer_norm": _layer_norm,
    "transformer_block": _transformer_block,
    "inception_block": _inception_block,
    "tiny_model": _tiny_model,
}


def run_check(name, eps=1e-5, tolerance=1e-4, seed=0):
    if name not in CHECKS:
        raise ConfigError(f"unknown gradient check {name!r}, expected one of {sorted(CHECKS)}")
    rng = np.random.default_rng(seed)
    fn, inputs = CHECKS[name](rng)
    try:
        report = T.gradcheck(fn, inputs, eps=eps, tolerance=tolerance, seed=seed)
    except NumericalInstabilityError as e:
        return CheckResult(name, None, str(e))
    return CheckResult(name, report)


def run_checks(names=None, eps=1e-5, tolerance=1e-4, seed=0):
    results = []
    for name in names or CHECKS:
        result = run_check(name, eps, tolerance, seed)
        log.debug("[GRADCHECK] finished check=%s passed=%s", name, result.passed)
        results.append(result)
    return results
