"""End-to-end repair: localize, relax, search, discretize, fine-tune."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import Dataset, build_repair_set, sample, split_repair
from ..errors import ConfigError, DegenerateArchitecture
from ..localizer import localize_vulnerable_block, vulnerable_layer
from ..network import Network
from ..spectrum import failure_subset
from .search import SearchConfig, alternate_optimize, finetune
from .supernet import discretize, install_block, relax_block

log = logging.getLogger(__name__)

LEVELS = ("block", "layer")


@dataclass(frozen=True)
class RepairConfig:
    level: str = "block"
    k: int = 50
    fail_cap: int | None = 100
    train_cap: int | None = 2000
    threshold_t: float = 0.0
    epsilon: float | None = None
    include_head: bool = False
    unfreeze_all: bool = False
    search: SearchConfig = SearchConfig()

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.epsilon is None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        for name in ("fail_cap", "train_cap"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 or null, got {v}")

    @property
    def seed(self) -> int:
        return self.search.seed

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RepairReport:
    level: str
    target_block: int | None
    k: int | None
    seed: int
    target_edges: list[list[int]] = field(default_factory=list)
    epochs_run: int = 0
    search_epochs: int = 0
    finetune_epochs: int = 0
    chosen_ops: dict[str, str] = field(default_factory=dict)
    pre_clean_accuracy: float | None = None
    post_clean_accuracy: float | None = None
    pre_corrupt_accuracy: float | None = None
    post_corrupt_accuracy: float | None = None
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    fallback_applied: bool = False
    noop: bool = False
    localization: dict | None = None
    alpha_initial: list | None = None
    alpha_final: list | None = None
    search_val_loss: list[float] = field(default_factory=list)
    finetune_val_loss: list[float] = field(default_factory=list)
    n_failures: int = 0
    n_repair: int = 0
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _rounded(asdict(self))


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def repair_sets(net: Network, data: Dataset, train: Dataset | None, cfg: RepairConfig) -> tuple[Dataset, Dataset]:
    """(collected failures, D^repair).

    Failures of ``data`` (capped, seeded) joined with a seeded sample of
    ``train``. Without training data the correctly classified part of
    ``data`` stands in for it.
    """
    fails = failure_subset(net, data, cfg.fail_cap, cfg.seed)
    if train is None:
        ok = np.flatnonzero(net.predict(data.images) == data.labels)
        train = data.subset(ok, name=f"{data.name}-correct")
    return fails, build_repair_set(fails, sample(train, cfg.train_cap, cfg.seed))


def _accuracy(net: Network, ds: Dataset) -> float:
    return float(net.accuracy(ds.images, ds.labels))


def _measure(net: Network, evals: dict[str, Dataset]) -> dict[str, float]:
    return {name: _accuracy(net, ds) for name, ds in evals.items()}


def _pick_searchable(spec, counts: dict[int, int]) -> int | None:
    cands = [b.index for b in spec.blocks if b.searchable]
    if not cands:
        return None
    best = max(counts.get(b, 0) for b in cands)
    return min(b for b in cands if counts.get(b, 0) == best)


def repair(net: Network, data: Dataset, train: Dataset | None = None, cfg: RepairConfig = RepairConfig(),
           block: int | str = "auto", evals: dict[str, Dataset] | None = None) -> tuple[Network, RepairReport]:
    """Repair ``net`` against the failures it makes on ``data``.

    ``evals`` maps names to datasets measured before and after; the names
    ``clean`` and ``corrupt`` fill the matching report fields. Returns a new
    network; the input is not modified.
    """
    evals = dict(evals or {})
    report = RepairReport(cfg.level, None, cfg.k if cfg.epsilon is None else None, cfg.seed, config=cfg.to_dict())
    pre = _measure(net, evals)
    fails, rset = repair_sets(net, data, train, cfg)
    report.n_failures, report.n_repair = len(fails), len(rset)

    def finish(out: Network) -> tuple[Network, RepairReport]:
        post = _measure(out, evals)
        report.metrics = {n: {"pre": pre[n], "post": post[n]} for n in evals}
        report.pre_clean_accuracy, report.post_clean_accuracy = pre.get("clean"), post.get("clean")
        report.pre_corrupt_accuracy, report.post_corrupt_accuracy = pre.get("corrupt"), post.get("corrupt")
        report.epochs_run = report.search_epochs + report.finetune_epochs
        return out, report

    if len(fails) == 0:
        msg = "no failure examples; network returned unchanged"
        warnings.warn(msg, stacklevel=2)
        report.noop = True
        report.warnings.append(msg)
        return finish(net.copy())

    loc = None
    if block == "auto" or cfg.level == "layer":
        loc = localize_vulnerable_block(net, rset, k=cfg.k, threshold_t=cfg.threshold_t, seed=cfg.seed,
                                        epsilon=cfg.epsilon, include_head=cfg.include_head)
        report.localization = loc.to_dict()
    if block == "auto":
        target = loc.chosen_block
        if target is None or not net.spec.block(target).searchable:
            alt = _pick_searchable(net.spec, loc.counts_per_block)
            report.warnings.append(f"localized block {target} is not searchable; repairing block {alt} instead")
            target = alt
    else:
        target = int(block)
        net.spec.block(target)  # range check
    if target is None or not net.spec.block(target).searchable:
        raise ConfigError(f"block {target} cannot be repaired (no searchable interior)")
    report.target_block = target
    spec_block = net.spec.block(target)

    region = None
    edge_keys = None
    if cfg.level == "layer":
        chain = [e for e in spec_block.edges if e.dst == e.src + 1 and any(l.kind == "conv" for l in e.layers)]
        if not chain:
            raise ConfigError(f"block {target} has no single-step edge to repair at layer level")
        offsets, off = {}, len(spec_block.entry)
        for e in spec_block.edges:
            offsets[(e.src, e.dst)] = off
            off += len(e.layers)
        layer_of = {offsets[(e.src, e.dst)] + i: e for e in chain for i, l in enumerate(e.layers) if l.kind == "conv"}
        li = vulnerable_layer(loc, target, sorted(layer_of))
        edge = layer_of[li]
        region = (edge.src, 1)
        edge_keys = [k for l in edge.layers for k in l.keys]

    work = net.copy()
    split_train, split_val = split_repair(rset, cfg.search.split_ratio, cfg.seed)
    sb = relax_block(work, target, region, seed=cfg.seed)
    report.target_edges = [[e.src, e.dst] for e in sb.edges]
    report.alpha_initial = np.round(sb.weights(), 8).tolist()
    hist = alternate_optimize(work, sb, split_train, split_val, cfg.search)
    report.search_epochs = hist.epochs_run
    report.search_val_loss = hist.val_loss
    report.alpha_final = np.round(sb.weights(), 8).tolist()
    try:
        disc = discretize(sb, work)
    except DegenerateArchitecture as exc:
        report.fallback_applied = True
        report.warnings.append(f"{exc}; original block kept")
        log.warning("%s; original block kept", exc)
        out = net.copy()
        report.chosen_ops = {f"{e.src}-{e.dst}": e.op for e in spec_block.edges}
        trainable = edge_keys
    else:
        report.chosen_ops = {f"{s}-{d}": op for (s, d), op in disc.chosen.items()}
        out = install_block(work, disc.block, disc.store)
        trainable = None if cfg.level == "block" else [k for k in disc.store if k in sb.store]
    ft = finetune(out, target, split_train, split_val, cfg.search, keys=trainable, unfreeze_all=cfg.unfreeze_all)
    report.finetune_epochs = ft.epochs_run
    report.finetune_val_loss = ft.val_loss
    return finish(out)
