"""Seeded weight perturbations used as ground-truth faults."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .network import Network


def plant_fault(net: Network, block: int, sigma_ratio: float = 0.5, seed: int = 0) -> Network:
    """Copy of ``net`` with Gaussian noise on every tensor of ``block``.

    Each tensor gets noise with standard deviation ``sigma_ratio`` times its
    own standard deviation, so scale and shift vectors are perturbed in
    proportion too.
    """
    if sigma_ratio < 0:
        raise ConfigError(f"sigma_ratio must be >= 0, got {sigma_ratio}")
    out = net.copy()
    rng = np.random.default_rng([seed, block])
    for layer in out.spec.block(block).layers:
        for k in layer.keys:
            t = out.store[k]
            sigma = sigma_ratio * float(t.data.std())
            t.data = (t.data + rng.normal(0.0, sigma, size=t.shape)).astype(t.dtype)
    return out
