"""Cross-entropy training with Adam, plus the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"CATSDCKP"
    u32       format version (1)
    u32       length of the config JSON, then that many UTF-8 bytes
    u32       number of arrays
    per array:
      u16     name length, then the UTF-8 name
      u8      ndim, then ndim x u32 extents
      float32 values, row-major, little-endian
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Conversation, FeatureDataset
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointValidationError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
)
from .metrics import MetricReport, compute_metrics
from .model import Batch, ModelConfig, Parameters, collate, decide, forward_batch, init_parameters, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"CATSDCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_conversations: int = 64
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: int = 32
    track_train_metrics: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_conversations < 1:
            raise ConfigError("batch_conversations must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision!r}")

    @property
    def dtype(self) -> np.dtype:
        return ad.dtype_for_bits(self.precision)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros(p.shape, p.dtype) for k, p in params.items()},
                   {k: np.zeros(p.shape, p.dtype) for k, p in params.items()})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    steps: int
    train: MetricReport | None = None
    validation: MetricReport | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "steps": self.steps,
            "train": self.train.to_dict() if self.train else None,
            "validation": self.validation.to_dict() if self.validation else None,
        }


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, record: EpochRecord) -> None:
        if self.epochs and record.epoch <= self.epochs[-1].epoch:
            raise ContractError("epoch indices must increase")
        self.epochs.append(record)

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "epochs": [e.to_dict() for e in self.epochs]}


@dataclass
class TrainResult:
    params: Parameters
    history: TrainingHistory
    best_params: Parameters | None = None
    steps: int = 0


# -------------------------------------------------------------------- loss
def cross_entropy_loss(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over the unmasked positions."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross-entropy over an all-masked batch")
    if np.any((labels[mask] != 0) & (labels[mask] != 1)):
        raise ContractError("labels must be 0 or 1")
    pick = (labels[..., None] == np.arange(logits.shape[-1])) & mask[..., None]
    log_probs = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum(log_probs * Tensor(pick, dtype=logits.dtype)), -1.0 / count)


# -------------------------------------------------------------------- Adam
def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              cfg: TrainConfig) -> tuple[Parameters, AdamState]:
    """One bias-corrected Adam update; returns fresh parameters and state."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    lr_1 = 1.0 / (1.0 - b1 ** t)
    lr_2 = 1.0 / (1.0 - b2 ** t)
    new_params: Parameters = {}
    m_new, v_new = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m * lr_1
        v_hat = v * lr_2
        update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_params[name] = Tensor((p.data - update).astype(p.dtype, copy=False), requires_grad=True, name=name)
        m_new[name], v_new[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_params, AdamState(m_new, v_new, t)


# ---------------------------------------------------------------- training
def evaluate_conversations(params, cfg: ModelConfig, conversations: Sequence[Conversation],
                           batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions and gold labels over every labeled target utterance."""
    preds, gold = [], []
    for start in range(0, len(conversations), batch_size):
        batch = collate(conversations[start:start + batch_size], cfg.input_dims, cfg.modalities)
        labels, _ = decide(forward_batch(params, cfg, batch, "eval"))
        preds.append(labels[batch.targets])
        gold.append(batch.labels[batch.targets])
    return np.concatenate(preds), np.concatenate(gold)


def evaluate(params, cfg: ModelConfig, conversations: Sequence[Conversation], batch_size: int = 64) -> MetricReport:
    preds, gold = evaluate_conversations(params, cfg, conversations, batch_size)
    return compute_metrics(preds, gold)


def batch_loss(params, cfg: ModelConfig, batch: Batch, mode: str, rng) -> Tensor:
    logits = forward_batch(params, cfg, batch, mode, rng)
    return cross_entropy_loss(logits, batch.labels, batch.targets)


def _check_dims(cfg: ModelConfig, ds: FeatureDataset, role: str) -> None:
    for m in cfg.modalities:
        if ds.dims[m] != cfg.input_dims[m]:
            raise DataError(f"{role} set modality {m} has dim {ds.dims[m]}, model expects {cfg.input_dims[m]}")


def train(model_cfg: ModelConfig, train_set: FeatureDataset | Sequence[Conversation],
          validation_set: FeatureDataset | Sequence[Conversation] | None = None,
          cfg: TrainConfig = TrainConfig(), params: Parameters | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Shuffle, batch, and apply one Adam step per batch for ``cfg.epochs`` epochs.

    Model selection keeps the parameters with the best validation F1 when a
    validation set is given (first best wins).
    """
    if isinstance(train_set, FeatureDataset):
        _check_dims(model_cfg, train_set, "training")
        train_convs = list(train_set.conversations)
    else:
        train_convs = list(train_set)
    if isinstance(validation_set, FeatureDataset):
        _check_dims(model_cfg, validation_set, "validation")
        validation_set = list(validation_set.conversations)
    if not train_convs:
        raise ContractError("training set is empty")
    dtype = cfg.dtype
    if params is None:
        params = init_parameters(model_cfg, dtype)
    else:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(params)
    history = TrainingHistory()
    best_params, best_f1 = None, -math.inf

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_convs))
        losses = []
        for start in range(0, len(order), cfg.batch_conversations):
            chunk = [train_convs[k] for k in order[start:start + cfg.batch_conversations]]
            try:
                batch = collate(chunk, model_cfg.input_dims, model_cfg.modalities)
            except DataError as exc:
                raise DataError(f"epoch {epoch}: {exc}") from None
            if not batch.targets.any():
                continue
            loss = batch_loss(params, model_cfg, batch, "train", rng)
            value = loss.item()
            if not math.isfinite(value) or value < 0:
                raise NumericError(f"epoch {epoch}, step {state.t + 1}: loss {value} on conversations "
                                   f"{batch.ids[:5]}{'...' if len(batch.ids) > 5 else ''}")
            grads = ad.grad(loss, params)
            params, state = adam_step(state, params, grads, cfg)
            losses.append(value)
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, state.t)
        if cfg.track_train_metrics:
            record.train = evaluate(params, model_cfg, train_convs, cfg.batch_conversations)
        if validation_set:
            record.validation = evaluate(params, model_cfg, validation_set, cfg.batch_conversations)
            if record.validation.f1 > best_f1:
                best_f1, best_params = record.validation.f1, params
                history.best_epoch = epoch
        history.append(record)
        logger.info("epoch %d loss %.5f", epoch, record.loss)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, history, best_params, state.t)


# -------------------------------------------------------------- checkpoints
def checkpoint_bytes(params: Mapping[str, Tensor], cfg: ModelConfig) -> bytes:
    out = io.BytesIO()
    config = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(config)))
    out.write(config)
    out.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def save_checkpoint(params: Mapping[str, Tensor], cfg: ModelConfig, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, cfg))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> tuple[Parameters, ModelConfig]:
    reader = _Reader(buf)
    if len(buf) < len(MAGIC) or reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a ConAttSD checkpoint (bad magic header)")
    version, config_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported "
                                     f"(expected {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointFormatError(f"checkpoint config is unreadable: {exc}") from None
    (count,) = reader.unpack("<I")
    params: Parameters = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=np.float32)
    if reader.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - reader.pos} trailing bytes after the last array")
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointValidationError(f"parameter {name!r} missing from checkpoint")
        if params[name].shape != shape:
            raise CheckpointValidationError(f"parameter {name!r} has shape {params[name].shape}, "
                                            f"config implies {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise CheckpointValidationError(f"parameters {sorted(extra)} are not part of the configured model")
    return {name: params[name] for name in expected}, config


def load_checkpoint(path: str | os.PathLike) -> tuple[Parameters, ModelConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())

