"""Neuron spectra and Tarantula suspiciousness."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, sample
from .errors import FormatError, InputError
from .network import ActivationTrace, Network, NeuronId, enumerate_neurons


@dataclass
class SpectrumCounts:
    """Per-neuron counters, aligned with ``neurons``:

    ``ac``/``nc`` activated / not activated on correctly classified examples,
    ``am``/``nm`` the same on misclassified ones.
    """

    neurons: list[NeuronId]
    ac: np.ndarray
    nc: np.ndarray
    am: np.ndarray
    nm: np.ndarray

    @property
    def n_correct(self) -> int:
        return int(self.ac[0] + self.nc[0]) if len(self.ac) else 0

    @property
    def n_failed(self) -> int:
        return int(self.am[0] + self.nm[0]) if len(self.am) else 0

    def table(self) -> np.ndarray:
        return np.stack([self.ac, self.nc, self.am, self.nm], axis=1)


@dataclass
class SuspiciousnessMap:
    neurons: list[NeuronId]
    scores: np.ndarray
    reweighted: bool = False

    def restrict(self, block: int) -> np.ndarray:
        mask = np.array([n.block == block for n in self.neurons])
        return self.scores[mask]


def iter_traces(net: Network, ds: Dataset, threshold: float = 0.0, batch_size: int = 256):
    for i in range(0, len(ds), batch_size):
        _, trace = net.forward_with_trace(ds.images[i : i + batch_size], threshold)
        trace.labels = ds.labels[i : i + batch_size]
        yield trace


def counts_from_traces(neurons: list[NeuronId], traces) -> SpectrumCounts:
    m = len(neurons)
    ac, nc, am, nm = (np.zeros(m, np.int64) for _ in range(4))
    for tr in traces:
        ok = tr.predicted == tr.labels
        f = tr.flags
        ac += f[ok].sum(axis=0)
        nc += (~f[ok]).sum(axis=0)
        am += f[~ok].sum(axis=0)
        nm += (~f[~ok]).sum(axis=0)
    return SpectrumCounts(neurons, ac, nc, am, nm)


def collect_spectrum(net: Network, ds: Dataset, threshold: float = 0.0, batch_size: int = 256) -> SpectrumCounts:
    if len(ds) == 0:
        raise InputError("cannot collect a spectrum over an empty dataset")
    return counts_from_traces(enumerate_neurons(net.spec), iter_traces(net, ds, threshold, batch_size))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def tarantula(ac, nc, am, nm) -> np.ndarray:
    """Tarantula score; an undefined ratio counts as 0, and 0/0 overall is 0."""
    ac, nc, am, nm = (np.asarray(v, dtype=np.float64) for v in (ac, nc, am, nm))
    fail = _ratio(am, am + nm)
    ok = _ratio(ac, ac + nc)
    return _ratio(fail, fail + ok)


def tarantula_scores(counts: SpectrumCounts) -> SuspiciousnessMap:
    return SuspiciousnessMap(counts.neurons, tarantula(counts.ac, counts.nc, counts.am, counts.nm))


def failure_indices(net: Network, ds: Dataset, cap: int | None = None, seed: int = 0) -> np.ndarray:
    """Positions of misclassified examples; seeded uniform subsample above ``cap``."""
    if len(ds) == 0:
        return np.zeros(0, np.int64)
    wrong = np.flatnonzero(net.predict(ds.images) != ds.labels)
    if cap is not None and len(wrong) > cap:
        wrong = np.sort(np.random.default_rng(seed).choice(wrong, size=cap, replace=False))
    return wrong


def failure_subset(net: Network, ds: Dataset, cap: int | None = None, seed: int = 0) -> Dataset:
    """The misclassified examples of ``ds`` in original order (possibly capped).

    An empty result is returned with a warning rather than raised.
    """
    idx = failure_indices(net, ds, cap, seed)
    if len(idx) == 0:
        warnings.warn(f"{ds.name}: the network misclassifies no example", stacklevel=2)
    sub = ds.subset(idx, name=f"{ds.name}-fail")
    sub.provenance = {"kind": "failures", "source": ds.provenance, "cap": cap, "seed": seed}
    return sub


def spectrum_set(failures: Dataset, training: Dataset | None, train_cap: int | None = 2000, seed: int = 0) -> Dataset:
    """D^repair used for spectrum collection: all failures plus a seeded training sample."""
    from .data import build_repair_set

    if training is None:
        return failures
    return build_repair_set(failures, sample(training, train_cap, seed))


# ---------------------------------------------------------------------------
# trace dump: u32 record length, then u32 example id, i32 predicted, i32 label,
# u32 neuron count, packed activation bits (little bit order)

_REC = struct.Struct("<IiiI")


def write_trace_dump(path, traces, start_id: int = 0) -> int:
    n = start_id
    with open(path, "wb") as fh:
        for tr in traces:
            labels = tr.labels if tr.labels is not None else np.full(len(tr.predicted), -1)
            for flags, pred, lab in zip(tr.flags, tr.predicted, labels):
                body = _REC.pack(n, int(pred), int(lab), len(flags)) + np.packbits(flags, bitorder="little").tobytes()
                fh.write(struct.pack("<I", len(body)) + body)
                n += 1
    return n - start_id


def read_trace_dump(path) -> list[tuple[int, int, int, np.ndarray]]:
    raw = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError("trace dump truncated in a length prefix")
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + length > len(raw) or length < _REC.size:
            raise FormatError("trace dump truncated in a record")
        ex, pred, lab, m = _REC.unpack_from(raw, pos)
        bits = np.frombuffer(raw[pos + _REC.size : pos + length], dtype=np.uint8)
        out.append((ex, pred, lab, np.unpackbits(bits, bitorder="little")[:m].astype(bool)))
        pos += length
    return out
