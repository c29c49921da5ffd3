"""Adam with global-norm clipping, validation early stopping, history logging."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Batch, EncodedExample, batches
from .model import ModelConfig, ModelParams, forward
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    clip_norm: float = 5.0
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None  # hard cap on optimizer steps across epochs

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def global_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for p in params if p.grad is not None))


def clip_gradients(params: Iterable[Tensor], clip_norm: float) -> float:
    """Rescale all grads jointly so their global L2 norm is at most ``clip_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    params = [p for p in params if p.grad is not None]
    norm = global_norm(params)
    if norm <= clip_norm:
        return 1.0
    factor = clip_norm / norm
    for p in params:
        p.grad = p.grad * factor
    return factor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place, then zero the grads."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.grad = np.zeros_like(p.data)


def mean_loss(items: Sequence[EncodedExample], params: ModelParams, config: ModelConfig, batch_size: int = 64, prepare: Callable[[Batch], Batch] | None = None) -> float:
    """Token-mean cross-entropy over a split (weighted by unmasked positions)."""
    total, count = 0.0, 0.0
    with no_grad():
        for b in batches(items, batch_size):
            b = prepare(b) if prepare else b
            total += float(forward(b, params, config, reduction="sum").loss.data)
            count += float(b.target_mask.sum())
    return total / count if count else 0.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    clipped_fraction: float
    steps: int


@dataclass
class FitResult:
    params: ModelParams  # snapshot at the best validation loss
    best_epoch: int
    best_valid_loss: float
    history: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.history:
                fh.write(json.dumps(asdict(rec)) + "\n")


def fit(
    params: ModelParams,
    config: ModelConfig,
    train: Sequence[EncodedExample],
    valid: Sequence[EncodedExample],
    cfg: TrainConfig,
    prepare: Callable[[Batch], Batch] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Train ``params`` in place; return a copy of the best-validation parameters.

    ``prepare`` maps each collated batch before use (e.g. trimming context turns).
    """
    if not train or not valid:
        raise ValueError("fit needs nonempty train and valid splits")
    rng = np.random.default_rng(cfg.seed)
    plist = list(params)
    state = AdamState.for_params(plist)
    history: list[EpochRecord] = []
    best: FitResult | None = None
    since_best = 0
    steps = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total, count, clipped, n_batches = 0.0, 0.0, 0, 0
        for bi, batch in enumerate(batches(train, cfg.batch_size, order)):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = prepare(batch) if prepare else batch
            params.zero_grad()
            loss = forward(batch, params, config).loss
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss)
            if clip_gradients(plist, cfg.clip_norm) < 1.0:
                clipped += 1
            adam_step(plist, state, cfg)
            steps += 1
            n_tok = float(batch.target_mask.sum())
            total += value * n_tok
            count += n_tok
            n_batches += 1
        if n_batches == 0:
            break
        valid_loss = mean_loss(valid, params, config, prepare=prepare)
        rec = EpochRecord(epoch, total / count, valid_loss, cfg.learning_rate, clipped / n_batches, steps)
        history.append(rec)
        logger.info("epoch %d train %.4f valid %.4f", epoch, rec.train_loss, valid_loss)
        if on_epoch:
            on_epoch(rec)
        if best is None or valid_loss < best.best_valid_loss:
            best = FitResult(params.copy(), epoch, valid_loss)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best is None:
        raise TrainingError("no epoch completed")
    best.history = history
    best.steps = steps
    return best
