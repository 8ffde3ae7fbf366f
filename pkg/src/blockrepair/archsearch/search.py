"""Alternating weight/alpha optimization and post-search fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import Dataset
from ..engine import ops
from ..engine.tensor import Tape, Tensor, backward
from ..engine.train import TrainConfig, TrainHistory, sgd_step, train_loop
from ..errors import ConfigError, InputError, NumericFailure
from ..network import Network
from .supernet import SuperBlock, block_input, superblock_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    weight_lr: float = 0.1
    weight_decay: float = 0.0005
    alpha_lr: float = 3e-4
    # inherited weights are tuned to the softmax-scaled mixture, so the
    # discretized block starts far from its optimum; lr 0.1 diverges there
    finetune_lr: float = 0.01
    epochs: int = 50
    patience: int = 5
    batch_size: int = 128
    finetune_epochs: int = 20
    finetune_patience: int = 5
    split_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("weight_lr", "alpha_lr", "finetune_lr", "weight_decay"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")
        for name in ("epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("patience", "finetune_patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        return asdict(self)

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.finetune_lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.finetune_epochs, patience=min(self.finetune_patience, max(self.finetune_epochs, 1)),
                           seed=self.seed)


@dataclass
class SearchHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    alpha_weights: list[list[list[float]]] = field(default_factory=list)  # per epoch, softmax rows
    best_epoch: int = -1
    early_stopped: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def _features(net: Network, sb: SuperBlock, ds) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ds, tuple):
        return ds
    return block_input(net, sb.index, ds.images), ds.labels


def _logits(net: Network, sb: SuperBlock, feats: Tensor) -> Tensor:
    return net.run_blocks(superblock_forward(sb, feats, net), sb.index + 1)


def supernet_loss(net: Network, sb: SuperBlock, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(y), batch_size):
        loss, _ = ops.softmax_cross_entropy(_logits(net, sb, Tensor(x[i : i + batch_size])), y[i : i + batch_size])
        total += float(loss.data) * len(y[i : i + batch_size])
    if not np.isfinite(total):
        raise NumericFailure("non-finite supernet validation loss")
    return total / len(y)


def _step(net, sb, x, y, params, lr, wd):
    with Tape() as tape:
        loss, _ = ops.softmax_cross_entropy(_logits(net, sb, Tensor(x)), y)
    backward(tape, loss, params)
    sgd_step(params, None, lr=lr, weight_decay=wd)
    return float(loss.data)


def alternate_optimize(net: Network, sb: SuperBlock, train, val, cfg: SearchConfig = SearchConfig()) -> SearchHistory:
    """First-order alternation, in place on ``sb``.

    Each iteration takes one SGD step on the candidate-op weights with the
    alphas frozen (training batch), then one plain gradient step on the
    alphas with the weights frozen (validation batch). Everything outside the
    superblock stays frozen. The snapshot with lowest validation loss,
    including the starting point, is kept.
    """
    x, y = _features(net, sb, train)
    vx, vy = _features(net, sb, val)
    if len(y) == 0 or len(vy) == 0:
        raise InputError("search needs non-empty train and validation splits")
    weights = sb.parameters()
    alphas = [sb.alphas]
    for p in net.parameters():
        p.requires_grad = False
    hist = SearchHistory()
    rng = np.random.default_rng([cfg.seed, 1])
    best = supernet_loss(net, sb, vx, vy)
    best_state = sb.copy()
    stale = 0
    bs = cfg.batch_size
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(y))
            vorder = rng.permutation(len(vy))
            vpos = 0
            total = 0.0
            for i in range(0, len(y), bs):
                idx = order[i : i + bs]
                for p in weights:
                    p.requires_grad = True
                sb.alphas.requires_grad = False
                total += _step(net, sb, x[idx], y[idx], weights, cfg.weight_lr, cfg.weight_decay) * len(idx)
                if vpos >= len(vy):
                    vorder = rng.permutation(len(vy))
                    vpos = 0
                vidx = vorder[vpos : vpos + bs]
                vpos += bs
                for p in weights:
                    p.requires_grad = False
                sb.alphas.requires_grad = True
                _step(net, sb, vx[vidx], vy[vidx], alphas, cfg.alpha_lr, 0.0)
            sb.alphas.requires_grad = False
            hist.train_loss.append(total / len(y))
            vl = supernet_loss(net, sb, vx, vy)
            hist.val_loss.append(vl)
            hist.alpha_weights.append(np.round(sb.weights(), 8).tolist())
            log.debug("search epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], vl)
            if vl < best:
                best, best_state, stale = vl, sb.copy(), 0
                hist.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    hist.early_stopped = True
                    break
    finally:
        for p in weights + alphas:
            p.requires_grad = False
            p.grad = None
    sb.alphas.data = best_state.alphas.data
    for k, t in best_state.store.items():
        sb.store[k].data = t.data
    sb.history = hist.alpha_weights
    return hist


def finetune(net: Network, index: int, train: Dataset, val: Dataset | None, cfg: SearchConfig = SearchConfig(),
             keys: list[str] | None = None, unfreeze_all: bool = False) -> TrainHistory:
    """Retrain block ``index`` of ``net`` in place with its architecture fixed.

    ``keys`` narrows the trainable set inside the block (layer mode). With
    ``unfreeze_all`` every parameter trains. The starting point competes in
    the best-validation-loss selection, so the result is never worse on it.
    """
    tcfg = cfg.finetune_config()
    if unfreeze_all:
        params = net.parameters()
        fwd = net.forward
        tr, va = train, val
    else:
        block_keys = [k for layer in net.spec.block(index).layers for k in layer.keys]
        chosen = block_keys if keys is None else [k for k in block_keys if k in set(keys)]
        params = [net.store[k] for k in chosen]
        fwd = lambda h: net.run_blocks(h, index)  # noqa: E731
        tr = (block_input(net, index, train.images), train.labels)
        va = (block_input(net, index, val.images), val.labels) if val is not None else None
    for p in net.parameters():
        p.requires_grad = False
    try:
        return train_loop(fwd, params, tr, va, tcfg, keep_initial=True)
    finally:
        for p in net.parameters():
            p.requires_grad = False
