"""Datasets: CIFAR-10 binary ingestion, synthetic tasks, corruptions,
repair-set construction and seeded splits."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, InputError, UnsupportedError

log = logging.getLogger(__name__)

CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32

CORRUPTIONS = ("GN", "SN", "IN", "GB", "BR", "CTR", "PIX")
OUT_OF_SCOPE_CORRUPTIONS = ("DB", "MB", "ZB", "SNW", "FRO", "FOG", "ET", "JPEG")
SEVERITY = {
    "GN": (0.08, 0.12, 0.18, 0.26, 0.38),
    "SN": (60, 25, 12, 5, 3),
    "IN": (0.03, 0.06, 0.09, 0.17, 0.27),
    "GB": (0.5, 0.75, 1.0, 1.25, 1.5),
    "BR": (0.05, 0.1, 0.15, 0.2, 0.3),
    "CTR": (0.75, 0.5, 0.4, 0.3, 0.15),
    "PIX": (0.9, 0.8, 0.7, 0.6, 0.45),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"
    provenance: dict = field(default_factory=lambda: {"kind": "clean"})
    flags: np.ndarray | None = None  # True = failure example, excluded from evaluation

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels outside [0, {self.num_classes})")
        if self.flags is None:
            self.flags = np.zeros(len(self.labels), dtype=bool)
        self.flags = np.asarray(self.flags, dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], flags=self.flags[idx],
                       name=name or self.name)

    def evaluation_split(self) -> "Dataset":
        """The examples not flagged as failures."""
        return self.subset(np.flatnonzero(~self.flags), name=f"{self.name}-eval")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise UnsupportedError(
                f"corruption {self.kind!r} is not implemented; supported: {', '.join(CORRUPTIONS)}"
                f" (not implemented: {', '.join(OUT_OF_SCOPE_CORRUPTIONS)})")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"severity must be 1..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY[self.kind][self.severity - 1]


def quantize(images: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to the 8-bit grid used on disk."""
    return (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# binary I/O

def load_cifar_binary(path) -> Dataset:
    """One CIFAR-10 binary batch: 3073-byte records, label byte first."""
    raw = np.fromfile(path, dtype=np.uint8)
    return _decode_records(raw, CIFAR_SHAPE, 10, Path(path).name, strict_cifar=True)


def _decode_records(raw: np.ndarray, shape, num_classes: int, name: str, strict_cifar=False) -> Dataset:
    rec = 1 + int(np.prod(shape))
    if raw.size == 0 or raw.size % rec:
        raise FormatError(f"{name}: {raw.size} bytes is not a whole number of {rec}-byte records")
    table = raw.reshape(-1, rec)
    labels = table[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise FormatError(f"{name}: label byte {labels.max()} exceeds {num_classes - 1}")
    images = table[:, 1:].reshape((-1,) + tuple(shape)).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes, name=name)


def save_dataset(ds: Dataset, path) -> None:
    """Records in the CIFAR layout plus a ``<path>.json`` provenance sidecar."""
    path = Path(path)
    pix = np.round(np.clip(ds.images, 0, 1) * 255).astype(np.uint8).reshape(len(ds), -1)
    if ds.num_classes > 256:
        raise ConfigError("label bytes hold at most 256 classes")
    table = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    path.write_bytes(table.tobytes())
    sidecar = {"name": ds.name, "provenance": ds.provenance, "shape": list(ds.shape), "num_classes": ds.num_classes,
               "n": len(ds), "flags": np.flatnonzero(ds.flags).tolist()}
    sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_dataset(path) -> Dataset:
    """Binary records with an optional sidecar; without one, plain CIFAR-10."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    side = sidecar_path(path)
    if not side.exists():
        return load_cifar_binary(path)
    meta = json.loads(side.read_text())
    ds = _decode_records(np.fromfile(path, dtype=np.uint8), tuple(meta["shape"]), meta["num_classes"], meta["name"])
    if len(ds) != meta["n"]:
        raise FormatError(f"{path}: sidecar says {meta['n']} records, file has {len(ds)}")
    flags = np.zeros(len(ds), bool)
    flags[np.asarray(meta.get("flags", []), dtype=np.int64)] = True
    return replace(ds, provenance=meta["provenance"], flags=flags)


# ---------------------------------------------------------------------------
# synthetic tasks

def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _shape_mask(kind: int, size: int, rng, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    s = size
    top = rng.integers(0, hw - s + 1)
    left = rng.integers(0, hw - s + 1)
    y0, x0 = top, left
    y1, x1 = top + s - 1, left + s - 1
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    inside = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    r = s / 2
    t = max(1.0, s / 5)
    if kind == 0:  # filled square
        return inside
    if kind == 1:  # hollow square
        inner = (yy >= y0 + t) & (yy <= y1 - t) & (xx >= x0 + t) & (xx <= x1 - t)
        return inside & ~inner
    if kind == 2:  # disk
        return _disk(yy, xx, cy, cx, r)
    if kind == 3:  # ring
        return _disk(yy, xx, cy, cx, r) & ~_disk(yy, xx, cy, cx, r - 1.5 * t)
    if kind == 4:  # horizontal bar
        return inside & (np.abs(yy - cy) <= t * 0.75)
    if kind == 5:  # vertical bar
        return inside & (np.abs(xx - cx) <= t * 0.75)
    if kind == 6:  # plus
        return inside & ((np.abs(yy - cy) <= t * 0.75) | (np.abs(xx - cx) <= t * 0.75))
    if kind == 7:  # diagonal cross
        return inside & ((np.abs((yy - y0) - (xx - x0)) <= t * 0.8) | (np.abs((yy - y0) + (xx - x0) - (s - 1)) <= t * 0.8))
    if kind == 8:  # triangle, apex up
        return inside & (np.abs(xx - cx) <= (yy - y0 + 1) / 2)
    if kind == 9:  # two dots
        return _disk(yy, xx, y0 + r / 2, x0 + r / 2, r / 2.2) | _disk(yy, xx, y1 - r / 2, x1 - r / 2, r / 2.2)
    raise ConfigError(f"shape kind {kind} undefined")


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def gen_synthetic(task: str = "shapes", n: int = 2000, classes: int = 10, seed: int = 0, image_size: int = 16) -> Dataset:
    """Seeded, class-balanced synthetic 3-channel task.

    ``shapes``: one randomly coloured, sized and placed outline/filled shape
    per image on a noisy background (up to 10 classes). ``gaussian-blobs``:
    per-class smooth random templates plus pixel noise.
    """
    if n < classes:
        raise ConfigError(f"n ({n}) must be >= classes ({classes})")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, classes, rng)
    hw = image_size
    images = np.empty((n, 3, hw, hw), dtype=np.float64)
    if task == "shapes":
        if classes > 10:
            raise ConfigError(f"shapes task has at most 10 classes, got {classes}")
        lo, hi = max(5, hw * 3 // 8), max(6, hw * 3 // 4)
        for i, y in enumerate(labels):
            bg = rng.uniform(0.0, 0.35, size=3)
            fg = rng.uniform(0.55, 1.0, size=3)
            mask = _shape_mask(int(y), int(rng.integers(lo, hi + 1)), rng, hw)
            img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
            images[i] = img + rng.normal(0, 0.03, size=img.shape)
    elif task == "gaussian-blobs":
        trng = np.random.default_rng([seed, 7919])
        templates = ndimage.gaussian_filter(trng.normal(size=(classes, 3, hw, hw)), sigma=(0, 0, hw / 8, hw / 8))
        templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
        for i, y in enumerate(labels):
            amp = rng.uniform(0.25, 0.4)
            images[i] = 0.5 + amp * templates[y] + rng.normal(0, 0.05, size=(3, hw, hw))
    else:
        raise ConfigError(f"unknown synthetic task {task!r} (use 'shapes' or 'gaussian-blobs')")
    return Dataset(quantize(images), labels, classes, name=f"{task}-{n}-s{seed}",
                   provenance={"kind": "synthetic", "task": task, "seed": seed, "image_size": hw})


# ---------------------------------------------------------------------------
# corruptions

def _area_weights(n: int, m: int) -> np.ndarray:
    """(m, n) overlap weights resampling n cells onto m by box averaging."""
    edges = np.linspace(0.0, n, m + 1)
    lo = np.maximum(edges[:-1, None], np.arange(n)[None])
    hi = np.minimum(edges[1:, None], np.arange(n)[None] + 1)
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _pixelate(x: np.ndarray, factor: float) -> np.ndarray:
    # box-average down, nearest up; pure nearest sampling aliases and is not
    # monotone in the factor
    c, h, w = x.shape
    h2, w2 = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    small = np.einsum("ih,chw,jw->cij", _area_weights(h, h2), x, _area_weights(w, w2))
    up_r = np.minimum(((np.arange(h) + 0.5) * h2 / h).astype(int), h2 - 1)
    up_c = np.minimum(((np.arange(w) + 0.5) * w2 / w).astype(int), w2 - 1)
    return small[:, up_r][:, :, up_c]


def corrupt_image(x: np.ndarray, kind: str, param: float, rng: np.random.Generator) -> np.ndarray:
    x = x.astype(np.float64)
    if kind == "GN":
        return x + rng.normal(0.0, param, size=x.shape) if param > 0 else x
    if kind == "SN":
        return rng.poisson(x * param) / param
    if kind == "IN":
        u = rng.random(size=x.shape)
        out = x.copy()
        out[u < param / 2] = 0.0
        out[(u >= param / 2) & (u < param)] = 1.0
        return out
    if kind == "GB":
        return ndimage.gaussian_filter(x, sigma=(0, param, param), mode="nearest") if param > 0 else x
    if kind == "BR":
        return x + param
    if kind == "CTR":
        m = x.mean(axis=(1, 2), keepdims=True)
        return (x - m) * param + m
    if kind == "PIX":
        return _pixelate(x, param)
    raise UnsupportedError(f"corruption {kind!r} not implemented")


def corrupt(ds: Dataset, spec: CorruptionSpec, parameter: float | None = None) -> Dataset:
    """Apply one corruption to every image (seeded per image), clip and quantize.

    ``parameter`` overrides the severity table value.
    """
    param = spec.parameter if parameter is None else parameter
    out = np.empty_like(ds.images)
    for i in range(len(ds)):
        rng = np.random.default_rng([spec.seed, i])
        out[i] = quantize(corrupt_image(ds.images[i], spec.kind, param, rng))
    prov = {"kind": "corrupted", "corruption": spec.kind, "severity": spec.severity, "seed": spec.seed,
            "source": ds.provenance}
    return replace(ds, images=out, name=f"{ds.name}-{spec.kind}{spec.severity}", provenance=prov)


# ---------------------------------------------------------------------------
# repair sets

def build_repair_set(failure_set: Dataset, training_set: Dataset) -> Dataset:
    """Failure examples followed by the training set; failures are flagged."""
    if failure_set.num_classes != training_set.num_classes:
        raise InputError(f"class counts differ: {failure_set.num_classes} vs {training_set.num_classes}")
    if len(failure_set) and failure_set.shape != training_set.shape:
        raise InputError(f"image shapes differ: {failure_set.shape} vs {training_set.shape}")
    images = np.concatenate([failure_set.images, training_set.images]) if len(failure_set) else training_set.images
    labels = np.concatenate([failure_set.labels, training_set.labels])
    flags = np.concatenate([np.ones(len(failure_set), bool), np.zeros(len(training_set), bool)])
    prov = {"kind": "repair", "failures": failure_set.provenance, "training": training_set.provenance,
            "n_failures": len(failure_set), "n_training": len(training_set)}
    return Dataset(images, labels, training_set.num_classes, name="repair", provenance=prov, flags=flags)


def mark_failures(ds: Dataset, indices) -> Dataset:
    flags = np.zeros(len(ds), bool)
    flags[np.asarray(indices, dtype=np.int64)] = True
    return replace(ds, flags=flags)


def split_repair(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded, class-stratified train/val partition with exact sizes."""
    if not 0 < ratio < 1:
        raise ConfigError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(ds)
    if n < 2:
        raise InputError(f"cannot split {n} example(s)")
    rng = np.random.default_rng(seed)
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    counts = ds.class_counts()
    present = counts[counts > 0]
    if present.min() < 2:
        warnings.warn("a class has fewer than 2 examples; falling back to an unstratified split", stacklevel=2)
        perm = rng.permutation(n)
        return ds.subset(np.sort(perm[:n_train]), "repair-train"), ds.subset(np.sort(perm[n_train:]), "repair-val")
    exact = counts * (n_train / n)
    quota = np.floor(exact).astype(int)
    remainder = n_train - quota.sum()
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order[:remainder]:
        quota[c] += 1
    train_idx, val_idx = [], []
    for c in range(len(counts)):
        idx = np.flatnonzero(ds.labels == c)
        perm = rng.permutation(idx)
        train_idx.append(perm[: quota[c]])
        val_idx.append(perm[quota[c] :])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return ds.subset(tr, "repair-train"), ds.subset(va, "repair-val")


def sample(ds: Dataset, cap: int | None, seed: int) -> Dataset:
    """Seeded uniform subsample of at most ``cap`` examples, original order kept."""
    if cap is None or len(ds) <= cap:
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=cap, replace=False))
    return ds.subset(idx)
