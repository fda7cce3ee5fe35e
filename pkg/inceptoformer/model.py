"""The InceptoFormer network, its configuration, ablation variants and checkpoints.

Per sample and per sensor signal s::

    z_s = reduce(temporal_encoder(PE + inception_cascade(x_s)))

The 18 reduced vectors form a token sequence for the spatial encoder, whose
flattened output feeds the classifier head.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .fileformat import canonical_json, read_container, write_container
from .layers import (
    PE_NORMS,
    Dense,
    Dropout,
    InceptionBlock1D,
    Module,
    PositionalEncoding,
    TransformerEncoderBlock,
)
from .tensor import Tensor

VARIANTS = ("model1", "model2", "model3")
CHECKPOINT_MAGIC = b"IFCKPT01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_signals: int = 18
    segment_len: int = 100
    filters_per_stream: int = 32
    kernel_sizes: tuple = (1, 3, 5)
    cascade_depth: int = 3
    temporal_heads: int = 2
    spatial_heads: int = 2
    transformer_layers: int = 1
    ff_expansion: int = 4
    reduced_dim: int = 32
    classifier_widths: tuple = (128, 64)
    n_classes: int = 4
    dropout: float = 0.2
    pe_scale: float = 0.1
    pe_norm: str = "scale"
    use_inception: bool = True
    use_transformers: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "classifier_widths", tuple(int(w) for w in self.classifier_widths))

    @property
    def d_model(self):
        return self.filters_per_stream * len(self.kernel_sizes)

    def validate(self):
        positive = ("n_signals", "segment_len", "filters_per_stream", "cascade_depth",
                    "temporal_heads", "spatial_heads", "transformer_layers", "ff_expansion",
                    "reduced_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel_sizes must all be odd, got {list(self.kernel_sizes)}")
        if not self.classifier_widths or any(w < 1 for w in self.classifier_widths):
            raise ConfigError(f"classifier_widths must be positive, got {list(self.classifier_widths)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pe_norm not in PE_NORMS:
            raise ConfigError(f"pe_norm must be one of {PE_NORMS}, got {self.pe_norm!r}")
        if not (self.use_inception or self.use_transformers):
            raise ConfigError("use_inception and use_transformers cannot both be false")
        if self.use_transformers:
            if self.d_model % self.temporal_heads:
                raise ConfigError(
                    f"temporal_heads={self.temporal_heads} does not divide d_model={self.d_model}")
            if self.reduced_dim % self.spatial_heads:
                raise ConfigError(
                    f"spatial_heads={self.spatial_heads} does not divide reduced_dim={self.reduced_dim}")
        return self

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["kernel_sizes"] = list(self.kernel_sizes)
        data["classifier_widths"] = list(self.classifier_widths)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config field {unknown[0]!r}")
        return cls(**data)

    def config_hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def ablation_variant(config, variant):
    """model1: Inception1D only; model2: transformers only; model3: full model."""
    if variant == "model1":
        return dataclasses.replace(config, use_inception=True, use_transformers=False)
    if variant == "model2":
        return dataclasses.replace(config, use_inception=False, use_transformers=True)
    if variant == "model3":
        return dataclasses.replace(config, use_inception=True, use_transformers=True)
    raise ConfigError(f"unknown ablation variant {variant!r}, expected one of {VARIANTS}")


class SignalStack(Module):
    """Everything applied to one sensor signal before the spatial encoder."""

    def __init__(self, config, rng, dropout_rng):
        d = config.d_model
        self.use_inception = config.use_inception
        self.use_transformers = config.use_transformers
        if config.use_inception:
            self.cascade = [
                InceptionBlock1D(1 if i == 0 else d, config.filters_per_stream, config.kernel_sizes, rng)
                for i in range(config.cascade_depth)
            ]
        else:
            self.lift = Dense(1, d, rng)
        if config.use_transformers:
            self.positional = PositionalEncoding(config.segment_len, d, config.pe_scale, config.pe_norm)
            self.encoder = [
                TransformerEncoderBlock(d, config.temporal_heads, config.ff_expansion, config.dropout,
                                        rng, dropout_rng)
                for _ in range(config.transformer_layers)
            ]
        self.reduction = Dense(d, config.reduced_dim, rng)

    def reduce(self, h):
        """Mean-pool over time, project to reduced_dim, SeLU. Accepts L x d or B x L x d."""
        pooled = T.reduce_mean(h, axis=-2)
        if pooled.ndim == 1:
            pooled = T.reshape(pooled, (1, pooled.shape[0]))
            out = T.selu(self.reduction(pooled))
            return T.reshape(out, (out.shape[1],))
        return T.selu(self.reduction(pooled))

    def forward(self, x):
        """x: B x 1 x T for one signal; returns B x reduced_dim."""
        if self.use_inception:
            h = x
            for block in self.cascade:
                h = block(h)
            h = T.transpose(h, (0, 2, 1))
        else:
            h = self.lift(T.transpose(x, (0, 2, 1)))
        if self.use_transformers:
            h = self.positional(h)
            for block in self.encoder:
                h = block(h)
        return self.reduce(h)


class InceptoFormerModel(Module):
    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.stacks = [SignalStack(config, rng, self.dropout_rng) for _ in range(config.n_signals)]
        if config.use_transformers:
            self.spatial_positional = PositionalEncoding(
                config.n_signals, config.reduced_dim, config.pe_scale, config.pe_norm)
            self.spatial_encoder = [
                TransformerEncoderBlock(config.reduced_dim, config.spatial_heads, config.ff_expansion,
                                        config.dropout, rng, self.dropout_rng)
                for _ in range(config.transformer_layers)
            ]
        widths = (config.n_signals * config.reduced_dim,) + config.classifier_widths
        self.classifier = [Dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.output = Dense(widths[-1], config.n_classes, rng)
        self.dropout = Dropout(config.dropout, self.dropout_rng)

    def set_dropout(self, rate):
        for module in self._iter_modules():
            if isinstance(module, Dropout):
                module.rate = rate

    def _iter_modules(self):
        stack = [self]
        while stack:
            module = stack.pop()
            yield module
            stack.extend(child for _, child in module._children())

    def forward(self, batch):
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.n_signals, cfg.segment_len):
            raise DimensionError(
                f"expected B x {cfg.n_signals} x {cfg.segment_len} input, got {x.shape}")
        size = x.shape[0]
        tokens = []
        for s, stack in enumerate(self.stacks):
            z = stack(T.index(x, (slice(None), slice(s, s + 1), slice(None))))
            tokens.append(T.reshape(z, (size, 1, cfg.reduced_dim)))
        h = T.concat(tokens, axis=1)
        if cfg.use_transformers:
            h = self.spatial_positional(h)
            for block in self.spatial_encoder:
                h = block(h)
        h = T.reshape(h, (size, cfg.n_signals * cfg.reduced_dim))
        for layer in self.classifier:
            h = self.dropout(T.selu(layer(h)))
        return self.output(h)


def build(config, seed=0):
    return InceptoFormerModel(config, seed)


def parameter_count(model):
    return sum(p.size for p in model.parameters())


def forward(model, batch, mode="eval"):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(batch)


def classify(logits):
    """Softmax probabilities and argmax classes; ties go to the lowest index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    probabilities = T._softmax(values, axis=-1)
    return values.argmax(axis=-1), probabilities


def predict(model, batch):
    model.eval()
    with T.no_grad():
        logits = model(batch)
    return classify(logits)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: InceptoFormerModel
    optimizer: dict | None
    extra: dict
    header: dict


def save_checkpoint(path, model, optimizer=None, extra=None):
    """Write weights, buffers, optional optimizer payload and the model config.

    ``optimizer`` is ``{"scalars": {...}, "arrays": {name: ndarray}}``.
    """
    header = {
        "format": "inceptoformer-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "seed": model.seed,
        "dropout_rng": model.dropout_rng.bit_generator.state,
        "extra": extra or {},
    }
    arrays = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    if optimizer is not None:
        header["optimizer"] = optimizer["scalars"]
        arrays += [(f"optimizer/{k}", v) for k, v in optimizer["arrays"].items()]
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path, expected_config=None):
    """Rebuild the model stored at ``path``.

    Refuses checkpoints whose stored hash does not match their config, or
    whose config differs from ``expected_config`` when one is given.
    """
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{Path(path).name}: unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    if config.config_hash() != header.get("config_hash"):
        raise ConfigError(f"{Path(path).name}: config hash does not match the stored config")
    if expected_config is not None and expected_config.config_hash() != header["config_hash"]:
        raise ConfigError(
            f"{Path(path).name}: checkpoint config hash {header['config_hash'][:12]} "
            f"does not match expected {expected_config.config_hash()[:12]}")
    model = build(config, header.get("seed", 0))
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    model.dropout_rng.bit_generator.state = header["dropout_rng"]
    optimizer = None
    if "optimizer" in header:
        optimizer = {
            "scalars": header["optimizer"],
            "arrays": {k[len("optimizer/"):]: v for k, v in arrays.items() if k.startswith("optimizer/")},
        }
    return Checkpoint(model=model, optimizer=optimizer, extra=header.get("extra", {}), header=header)
