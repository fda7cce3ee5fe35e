"""Nadam optimisation and the early-stopped mini-batch training loop."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .fileformat import canonical_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    max_epochs: int = 500
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    dropout: float = 0.2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_min_delta < 0:
            raise ConfigError(f"early_stop_min_delta must be >= 0, got {self.early_stop_min_delta}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0 when set, got {self.grad_clip}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config field {unknown[0]!r}")
        return cls(**data)

    def config_hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


class NadamState:
    """Moment estimates for one ordered list of parameters."""

    def __init__(self, shapes, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.step = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    @classmethod
    def for_params(cls, params, config):
        return cls([p.shape for p in params], config.learning_rate, config.beta1, config.beta2, config.epsilon)

    def to_payload(self):
        scalars = {
            "step": self.step,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "n_params": len(self.m),
        }
        arrays = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            arrays[f"m/{i}"] = m
            arrays[f"v/{i}"] = v
        return {"scalars": scalars, "arrays": arrays}

    @classmethod
    def from_payload(cls, payload):
        scalars, arrays = payload["scalars"], payload["arrays"]
        n = scalars["n_params"]
        state = cls([], scalars["learning_rate"], scalars["beta1"], scalars["beta2"], scalars["epsilon"])
        state.step = scalars["step"]
        state.m = [np.array(arrays[f"m/{i}"]) for i in range(n)]
        state.v = [np.array(arrays[f"v/{i}"]) for i in range(n)]
        return state

    def copy(self):
        return NadamState.from_payload(self.to_payload())


def nadam_apply(params, grads, state, names=None):
    """One Nadam step, in place on ``params`` and ``state``.

    m and v are the usual exponential moments; the first moment gets the
    Nesterov look-ahead m_hat = b1*m/(1-b1^(t+1)) + (1-b1)*g/(1-b1^t), the
    second the plain bias correction v_hat = v/(1-b2^t).
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError(
            f"nadam got {len(params)} params, {len(grads)} grads and state for {len(state.m)}")
    names = names or [f"param[{i}]" for i in range(len(params))]
    grads = [np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (name, p, g) in enumerate(zip(names, params, grads)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * g / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if not np.isfinite(update).all():
            raise NumericalError(f"non-finite optimizer update in {name} at step {t}")
        state.m[i] = m
        state.v[i] = v
        p.data = p.data - update


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def fold_seed(master_seed, fold_index):
    """Independent per-fold seed derived from the master seed."""
    return int(np.random.SeedSequence([master_seed, fold_index]).generate_state(1)[0])


def stack_segments(segments):
    """Segments (T x 18 each) -> B x 18 x T array and integer labels."""
    values = np.stack([s.values.T for s in segments])
    labels = np.array([s.label for s in segments], dtype=np.int64)
    return values, labels


def batch_indices(n, batch_size, rng=None):
    """Shuffled index batches; a trailing batch of one joins the previous batch."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def evaluate_loss(model, inputs, labels, batch_size=64):
    """Mean cross-entropy and accuracy in eval mode, without recording."""
    model.eval()
    total = 0.0
    correct = 0
    with T.no_grad():
        for idx in batch_indices(len(labels), batch_size):
            logits = model(inputs[idx])
            total += T.cross_entropy(logits, labels[idx]).item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return total / len(labels), correct / len(labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_ms: float


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)
    optimizer: NadamState | None = None
    stopped_early: bool = False


def train(model, train_segments, val_segments, config, val_loss_fn=None, optimizer=None, fold=None):
    """Train ``model`` in place and leave it holding the best-epoch weights.

    ``val_loss_fn(model) -> (loss, accuracy)`` replaces the default
    validation pass. An ``optimizer`` state continues a previous run.
    The best snapshot follows any strict decrease of the validation loss;
    the patience counter only resets on a decrease larger than min_delta.
    The returned optimizer state and the model's dropout RNG are taken
    from the best epoch, matching the restored weights.
    """
    config.validate()
    if not train_segments or not val_segments:
        raise ConfigError("training needs non-empty train and validation sets")
    inputs, labels = stack_segments(train_segments)
    val_inputs, val_labels = stack_segments(val_segments)
    if val_loss_fn is None:
        def val_loss_fn(m):
            return evaluate_loss(m, val_inputs, val_labels, config.batch_size)

    model.set_dropout(config.dropout)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = optimizer or NadamState.for_params(params, config)
    rng = np.random.default_rng(config.seed)
    tag = "" if fold is None else f"fold={fold} "

    best_state = model.state_dict()
    best_optimizer = state.copy()
    best_rng = model.dropout_rng.bit_generator.state
    best_loss = math.inf
    best_epoch = 0
    wait = 0
    stopped = False
    history = []
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        model.train()
        loss_sum = 0.0
        correct = 0
        for b, idx in enumerate(batch_indices(len(labels), config.batch_size, rng)):
            with T.Tape() as tape:
                logits = model(inputs[idx])
                loss = T.cross_entropy(logits, labels[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}")
                model.zero_grad()
                T.backward(loss)
            tape.clear()
            grads = T.gradients(params)
            if config.grad_clip is not None:
                grads, _ = clip_grad_norm(grads, config.grad_clip)
            try:
                nadam_apply(params, grads, state, names)
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch} batch {b}: {e}") from None
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())

        val_loss, val_acc = val_loss_fn(model)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(labels),
            train_acc=correct / len(labels),
            val_loss=float(val_loss),
            val_acc=float(val_acc),
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        history.append(record)
        log.info("[EPOCH] %sepoch=%d train_loss=%.6f train_acc=%.4f val_loss=%.6f val_acc=%.4f",
                 tag, epoch, record.train_loss, record.train_acc, record.val_loss, record.val_acc)

        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            improved = best_loss - val_loss > config.early_stop_min_delta
            best_loss = val_loss
            best_state = model.state_dict()
            best_optimizer = state.copy()
            best_rng = model.dropout_rng.bit_generator.state
            best_epoch = epoch
            wait = 0 if improved else wait + 1
        else:
            wait += 1
        if wait >= config.early_stop_patience:
            stopped = True
            log.info("[EARLY_STOP] %sepoch=%d best_epoch=%d best_val_loss=%.6f", tag, epoch, best_epoch, best_loss)
            break

    model.load_state_dict(best_state)
    model.dropout_rng.bit_generator.state = best_rng
    return TrainResult(best_state, best_epoch, best_loss, history, best_optimizer, stopped)


def write_history(path, history):
    columns = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms"]
    frame = pd.DataFrame([dataclasses.asdict(r) for r in history], columns=columns)
    frame.to_csv(path, index=False)
