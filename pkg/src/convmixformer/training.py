"""Cross-entropy training with Adam and a step learning-rate schedule."""
from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import DatasetManifest
from .errors import ConfigError, DimensionError, NonFiniteError, NumericError
from .fusion import ProbabilityDistribution, ScoreRow, write_scores
from .model import ModelConfig, ModelParams, classify_logits, classify_sequence, init_model
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-4
    lr_decay_epochs: tuple = (50, 75)
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, scaled by the current lr
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e < 0 for e in d):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing and >= 0, got {d}")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Base lr times ``factor ** k``, k = number of decay milestones <= ``epoch`` (0-based)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    k = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr * config.lr_decay_factor ** k


def cross_entropy(logits, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    seconds: float

    def log_line(self) -> str:
        return f"{self.epoch} {self.lr!r} {self.loss!r} {self.accuracy!r} {self.seconds:.3f}"


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        m = {n: np.zeros_like(t.data) for n, t in params.named_tensors()}
        v = {n: np.zeros_like(t.data) for n, t in params.named_tensors()}
        return cls(params, m, v)


def adam_step(state: TrainState, grads: dict, lr: float, config: TrainConfig = TrainConfig()) -> TrainState:
    """One bias-corrected Adam update, in place on ``state``; returns ``state``."""
    named = state.params.named_tensors()
    for name, t in named:
        g = grads.get(name)
        if g is None or g.shape != t.shape:
            got = None if g is None else g.shape
            raise DimensionError(f"gradient for {name} has shape {got}, expected {t.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named:
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay:
            update = update + config.weight_decay * t.data
        t.data = t.data - lr * update
    return state


def check_compatible(model_config: ModelConfig, manifest: DatasetManifest) -> None:
    want = (model_config.seq_len, model_config.feature_dim, model_config.num_classes)
    got = (manifest.seq_len, manifest.feature_dim, manifest.num_classes)
    if want != got:
        raise ConfigError(f"model expects (T, D, n) = {want}, dataset has {got}")


@dataclass
class TrainResult:
    state: TrainState
    metrics: list


def train_arrays(
    model_config: ModelConfig,
    train_config: TrainConfig,
    x: np.ndarray,
    y: np.ndarray,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[EpochMetrics], Optional[bool]]] = None,
) -> TrainResult:
    """Train on in-memory arrays ``x`` [N, T, D] and ``y`` [N].

    ``on_epoch`` sees each epoch's metrics; returning True ends training early.
    """
    if x.ndim != 3 or x.shape[1:] != (model_config.seq_len, model_config.feature_dim):
        raise ConfigError(f"features {x.shape} do not match model (T, D) = "
                          f"({model_config.seq_len}, {model_config.feature_dim})")
    if len(y) != len(x) or len(x) == 0:
        raise ConfigError("need a non-empty dataset with one label per sample")
    if y.min() < 0 or y.max() >= model_config.num_classes:
        raise ConfigError(f"labels must lie in [0, {model_config.num_classes})")
    if params is None:
        params = init_model(model_config, seed=train_config.seed)
    state = TrainState.fresh(params)
    rng = np.random.default_rng([train_config.seed, 7])
    named = params.named_tensors()
    n = len(x)
    bs = train_config.batch_size
    for epoch in range(train_config.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(train_config, epoch)
        order = rng.permutation(n) if train_config.shuffle else np.arange(n)
        loss_sum = 0.0
        hits = 0
        for b0 in range(0, n, bs):
            idx = order[b0:b0 + bs]
            for _, t in named:
                t.zero_grad()
            try:
                logits = classify_logits(x[idx], params, model_config, mode="train")
                loss = cross_entropy(logits, y[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise NumericError(f"epoch {epoch}, step {state.step + 1}: {exc}") from exc
            adam_step(state, {name: t.grad for name, t in named}, lr, train_config)
            loss_sum += float(loss.data[0]) * len(idx)
            hits += int((logits.data.argmax(axis=1) == y[idx]).sum())
        state.epoch = epoch + 1
        record = EpochMetrics(epoch, lr, loss_sum / n, hits / n, time.perf_counter() - start)
        state.history.append(record)
        logger.debug("epoch %d lr %.3g loss %.5f acc %.4f", epoch, lr, record.loss, record.accuracy)
        if on_epoch is not None and on_epoch(record):
            break
    return TrainResult(state, state.history)


def write_metrics_log(path: Union[str, os.PathLike], metrics: Sequence[EpochMetrics]) -> None:
    lines = ["# epoch lr loss accuracy wall_seconds"] + [m.log_line() for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_log(path: Union[str, os.PathLike]) -> list[EpochMetrics]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        e, lr, loss, acc, sec = line.split()
        out.append(EpochMetrics(int(e), float(lr), float(loss), float(acc), float(sec)))
    return out


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: DatasetManifest,
    checkpoint_path: Optional[Union[str, os.PathLike]] = None,
    metrics_path: Optional[Union[str, os.PathLike]] = None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    check_compatible(model_config, manifest)
    x, y, _ = manifest.load_arrays()
    result = train_arrays(model_config, train_config, x, y, params=params)
    if checkpoint_path is not None:
        save_checkpoint(result.state.params, checkpoint_path)
    if metrics_path is not None:
        write_metrics_log(metrics_path, result.metrics)
    return result


# --- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # [true, predicted]
    rows: list  # ScoreRow per sample

    @property
    def probs(self) -> np.ndarray:
        return np.stack([r.dist.probs for r in self.rows])


def predict_proba(params: ModelParams, config: ModelConfig, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [classify_sequence(x[i:i + batch_size], params, config, mode="eval").data
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate_arrays(
    params: ModelParams,
    config: ModelConfig,
    x: np.ndarray,
    y: np.ndarray,
    ids: Optional[Sequence[str]] = None,
    modality: str = "synthetic",
    batch_size: int = 64,
) -> EvalResult:
    probs = predict_proba(params, config, x, batch_size)
    pred = probs.argmax(axis=1)
    n = config.num_classes
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    ids = ids if ids is not None else [f"s{i:05d}" for i in range(len(x))]
    rows = [ScoreRow(sid, ProbabilityDistribution(p, modality), int(label))
            for sid, p, label in zip(ids, probs, y)]
    return EvalResult(float((pred == y).mean()), confusion, rows)


def evaluate(
    params: ModelParams,
    model_config: ModelConfig,
    manifest: DatasetManifest,
    scores_path: Optional[Union[str, os.PathLike]] = None,
    modality: Optional[str] = None,
) -> EvalResult:
    check_compatible(model_config, manifest)
    x, y, ids = manifest.load_arrays()
    modality = modality or manifest.modalities[0]
    result = evaluate_arrays(params, model_config, x, y, ids, modality)
    if scores_path is not None:
        write_scores(scores_path, result.rows)
    return result


def initial_loss(params: ModelParams, config: ModelConfig, x: np.ndarray, y: np.ndarray) -> float:
    logits = classify_logits(x, params, config, mode="eval")
    return float(cross_entropy(logits, y).data[0])

