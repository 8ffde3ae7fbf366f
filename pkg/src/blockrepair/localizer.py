"""Gradient-reweighted suspiciousness and the vulnerable-block vote."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import ops
from .engine.tensor import Tape, Tensor, backward
from .errors import ConfigError, InputError
from .network import Network, NetworkSpec, NeuronId, enumerate_neurons, iter_neuron_layers
from .spectrum import SuspiciousnessMap, collect_spectrum, failure_subset, tarantula_scores


@dataclass
class GradientProfile:
    neurons: list[NeuronId]
    g: np.ndarray
    blocks: list[int]
    block_means: np.ndarray
    global_mean: float

    def block_mean(self, index: int) -> float:
        return float(self.block_means[self.blocks.index(index)])


def _neuron_weights(net: Network):
    """(block, layer, weight tensors) for every neuron-bearing layer."""
    for b, li, layer in iter_neuron_layers(net.spec):
        yield b, li, layer, [net.store[k] for k in layer.keys]


def _per_neuron_magnitude(layer, tensors) -> np.ndarray:
    """Mean |grad| over the weights owned by each output channel / unit."""
    w = tensors[0]
    gw = np.abs(w.grad.astype(np.float64)).reshape(w.shape[0], -1)
    if layer.kind == "linear":
        gb = np.abs(tensors[1].grad.astype(np.float64))[:, None]
        return np.concatenate([gw, gb], axis=1).mean(axis=1)
    return gw.mean(axis=1)


def neuron_gradients(net: Network, failures: Dataset) -> np.ndarray:
    """g_j: per-example backward on the failure set, averaged per neuron.

    One backward pass per example so the magnitude is taken before averaging
    across examples.
    """
    if len(failures) == 0:
        raise InputError("neuron gradients need at least one failure example")
    layers = list(_neuron_weights(net))
    owned = [t for *_, ts in layers for t in ts]
    sizes = [t[0].shape[0] for *_, t in layers]
    total = np.zeros(sum(sizes), np.float64)
    for p in net.parameters():
        p.requires_grad = False
    for t in owned:
        t.requires_grad = True
    try:
        for i in range(len(failures)):
            with Tape() as tape:
                logits = net.forward(Tensor(failures.images[i : i + 1]))
                loss, _ = ops.softmax_cross_entropy(logits, failures.labels[i : i + 1])
            backward(tape, loss, owned)
            total += np.concatenate([_per_neuron_magnitude(layer, ts) for _, _, layer, ts in layers])
    finally:
        for t in owned:
            t.requires_grad = False
            t.grad = None
    return total / len(failures)


def block_gradients(g: np.ndarray, spec_or_neurons) -> tuple[np.ndarray, float, list[int]]:
    """Per-block means G_i and their mean Ḡ, over blocks that own neurons."""
    neurons = enumerate_neurons(spec_or_neurons) if isinstance(spec_or_neurons, NetworkSpec) else spec_or_neurons
    g = np.asarray(g, dtype=np.float64)
    if len(g) != len(neurons):
        raise InputError(f"{len(g)} gradients for {len(neurons)} neurons")
    owner = np.array([n.block for n in neurons])
    blocks = sorted(set(owner.tolist()))
    means = np.array([g[owner == b].mean() for b in blocks])
    return means, float(means.mean()), blocks


def gradient_profile(net: Network, failures: Dataset) -> GradientProfile:
    neurons = enumerate_neurons(net.spec)
    g = neuron_gradients(net, failures)
    means, gbar, blocks = block_gradients(g, neurons)
    return GradientProfile(neurons, g, blocks, means, gbar)


def reweight_scores(scores, g, gbar: float) -> np.ndarray:
    """ŝ_j = |g_j - Ḡ| / max |g - Ḡ| * s_j; unchanged if every deviation is 0."""
    s = np.asarray(scores.scores if isinstance(scores, SuspiciousnessMap) else scores, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise InputError(f"score/gradient length mismatch: {s.shape} vs {g.shape}")
    dev = np.abs(g - gbar)
    top = dev.max() if dev.size else 0.0
    if not np.isfinite(top):
        raise InputError("gradient deviations are not finite")
    if top == 0:
        return s.copy()
    return dev / top * s


def select_vulnerable(scores, k: int | None = None, threshold: float | None = None,
                      eligible: np.ndarray | None = None) -> np.ndarray:
    """Indices of the vulnerable neurons, in neuron order.

    Top-``k`` by score with ties at the cut going to the lower index, or every
    score ``>= threshold`` when a threshold is given instead. ``eligible``
    masks neurons out of the ranking.
    """
    s = np.asarray(scores, dtype=np.float64)
    pool = np.arange(len(s)) if eligible is None else np.flatnonzero(eligible)
    if threshold is not None:
        if k is not None:
            raise ConfigError("give either k or threshold, not both")
        return pool[s[pool] >= threshold]
    if k is None or k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(pool):
        warnings.warn(f"k={k} exceeds the {len(pool)} candidate neurons; clamped", stacklevel=2)
        k = len(pool)
    # stable sort on -score keeps lower indices first among equal scores
    order = pool[np.argsort(-s[pool], kind="stable")]
    return np.sort(order[:k])


def block_vote(neurons: list[NeuronId], chosen: np.ndarray, blocks: list[int]) -> tuple[int | None, dict[int, int], bool]:
    counts = {b: 0 for b in blocks}
    for i in chosen:
        b = neurons[i].block
        if b in counts:
            counts[b] += 1
    if not counts or max(counts.values()) == 0:
        return None, counts, False
    best = max(counts.values())
    winners = [b for b in blocks if counts[b] == best]
    return winners[0], counts, len(winners) > 1


@dataclass
class LocalizationReport:
    chosen_block: int | None
    counts_per_block: dict[int, int]
    k: int | None
    threshold_t: float
    seed: int
    tie_break_applied: bool
    epsilon: float | None = None
    n_failures: int = 0
    n_repair: int = 0
    excluded_blocks: list[int] = field(default_factory=list)
    vulnerable: list[NeuronId] = field(default_factory=list)
    suspiciousness: np.ndarray | None = None
    reweighted: np.ndarray | None = None
    gradients: GradientProfile | None = None
    note: str = ""

    def to_dict(self, include_scores: bool = False) -> dict:
        d = {
            "chosen_block": self.chosen_block,
            "counts_per_block": {str(b): c for b, c in self.counts_per_block.items()},
            "k": self.k, "threshold_t": self.threshold_t, "seed": self.seed,
            "tie_break_applied": self.tie_break_applied, "epsilon": self.epsilon,
            "n_failures": self.n_failures, "n_repair": self.n_repair,
            "excluded_blocks": self.excluded_blocks,
            "vulnerable": [[n.block, n.layer, n.channel] for n in self.vulnerable],
            "note": self.note,
        }
        if include_scores and self.reweighted is not None:
            d["scores"] = [round(float(v), 12) for v in self.reweighted]
            d["gradient_block_means"] = [round(float(v), 12) for v in self.gradients.block_means]
        return d


def localize_vulnerable_block(net: Network, repair_set: Dataset, failures: Dataset | None = None, k: int | None = 50,
                              threshold_t: float = 0.0, seed: int = 0, epsilon: float | None = None,
                              include_head: bool = False) -> LocalizationReport:
    """Spectrum -> Tarantula -> gradient reweighting -> top-k -> block vote.

    ``failures`` defaults to the examples of ``repair_set`` the network gets
    wrong. Head blocks are left out of the vote unless ``include_head``.
    """
    if failures is None:
        failures = failure_subset(net, repair_set)
    excluded = [] if include_head else [b.index for b in net.spec.blocks if b.role == "head"]
    voters = [b.index for b in net.spec.blocks if b.index not in excluded]
    if len(failures) == 0:
        return LocalizationReport(None, {b: 0 for b in voters}, k, threshold_t, seed, False, epsilon,
                                  0, len(repair_set), excluded, note="no failure examples; nothing to localize")
    counts = collect_spectrum(net, repair_set, threshold_t)
    smap = tarantula_scores(counts)
    prof = gradient_profile(net, failures)
    s_hat = reweight_scores(smap, prof.g, prof.global_mean)
    eligible = np.array([n.block in voters for n in counts.neurons])
    if epsilon is not None:
        chosen = select_vulnerable(s_hat, threshold=epsilon, eligible=eligible)
        k_used = None
    else:
        chosen = select_vulnerable(s_hat, k, eligible=eligible)
        k_used = k
    block, per_block, tie = block_vote(counts.neurons, chosen, voters)
    return LocalizationReport(block, per_block, k_used, threshold_t, seed, tie, epsilon, len(failures),
                              len(repair_set), excluded, [counts.neurons[i] for i in chosen], smap.scores,
                              s_hat, prof)


def vulnerable_layer(report: LocalizationReport, block: int, candidates: list[int]) -> int:
    """Layer index within ``block`` holding the most vulnerable neurons; ties -> lowest."""
    tally = {li: 0 for li in candidates}
    for n in report.vulnerable:
        if n.block == block and n.layer in tally:
            tally[n.layer] += 1
    best = max(tally.values())
    return min(li for li, c in tally.items() if c == best)
