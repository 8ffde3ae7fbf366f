"""SGD with weight decay and an early-stopped, seeded training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, InputError, NumericFailure
from .ops import softmax_cross_entropy
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    weight_decay: float = 0.0005
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be a finite value >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.loss != "cross_entropy":
            raise ConfigError(f"only cross_entropy loss is supported, got {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(params: Sequence[Tensor], config: TrainConfig, lr: float | None = None, weight_decay: float | None = None) -> None:
    """In place: ``w <- w - lr * (g + weight_decay * w)``."""
    lr = config.learning_rate if lr is None else lr
    wd = config.weight_decay if weight_decay is None else weight_decay
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericFailure(f"non-finite gradient in {p.name or 'parameter'}")
        if lr == 0:
            continue
        step = p.grad + wd * p.data if wd else p.grad
        p.data = (p.data - p.data.dtype.type(lr) * step).astype(p.data.dtype, copy=False)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    early_stopped: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs_run"] = self.epochs_run
        return d


def _arrays(ds):
    if isinstance(ds, tuple):
        x, y = ds
    else:
        x, y = ds.images, ds.labels
    return np.asarray(x), np.asarray(y, dtype=np.int64)


def evaluate_loss(forward: Callable[[Tensor], Tensor], x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy without recording a tape."""
    total = 0.0
    correct = 0
    for i in range(0, len(y), batch_size):
        logits = forward(Tensor(x[i : i + batch_size]))
        loss, _ = softmax_cross_entropy(logits, y[i : i + batch_size])
        total += float(loss.data) * len(y[i : i + batch_size])
        correct += int((logits.data.argmax(axis=1) == y[i : i + batch_size]).sum())
    if not np.isfinite(total):
        raise NumericFailure("non-finite validation loss")
    return total / len(y), correct / len(y)


def train_loop(
    forward: Callable[[Tensor], Tensor],
    params: Sequence[Tensor],
    train,
    val=None,
    config: TrainConfig = TrainConfig(),
    step: Callable[[Sequence[Tensor], TrainConfig], None] = sgd_step,
    keep_initial: bool = False,
) -> TrainHistory:
    """Mini-batch training of ``params`` with early stopping.

    ``train``/``val`` are datasets (``.images``, ``.labels``) or ``(x, y)``
    tuples. Early stopping watches validation loss (training loss when no
    validation set is given). On return ``params`` hold the snapshot with the
    best monitored loss.
    """
    x, y = _arrays(train)
    if len(y) == 0:
        raise InputError("training set is empty")
    if val is not None:
        vx, vy = _arrays(val)
        if len(vy) == 0:
            raise InputError("validation set is empty")
    rng = np.random.default_rng(config.seed)
    hist = TrainHistory()
    best = np.inf
    best_state = [p.data.copy() for p in params]
    stale = 0
    if keep_initial:
        best = evaluate_loss(forward, vx, vy)[0] if val is not None else evaluate_loss(forward, x, y)[0]
    for p in params:
        p.requires_grad = True
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(y))
        seen = 0
        total = 0.0
        correct = 0
        for i in range(0, len(y), config.batch_size):
            idx = order[i : i + config.batch_size]
            with Tape() as tape:
                logits = forward(Tensor(x[idx]))
                loss, _ = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.data):
                raise NumericFailure(f"non-finite training loss at epoch {epoch}")
            backward(tape, loss, params)
            step(params, config)
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
        hist.train_loss.append(total / seen)
        hist.train_acc.append(correct / seen)
        if val is not None:
            vl, va = evaluate_loss(forward, vx, vy)
            hist.val_loss.append(vl)
            hist.val_acc.append(va)
            monitored = vl
        else:
            monitored = hist.train_loss[-1]
        log.debug("epoch %d train_loss %.4f monitored %.4f", epoch, hist.train_loss[-1], monitored)
        if monitored < best:
            best = monitored
            best_state = [p.data.copy() for p in params]
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                hist.early_stopped = True
                break
    for p, saved in zip(params, best_state):
        p.data = saved
        p.grad = None
    return hist
