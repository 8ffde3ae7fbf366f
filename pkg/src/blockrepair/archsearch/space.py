"""Candidate operations for a relaxed edge."""
from __future__ import annotations

from enum import IntEnum

import numpy as np

from ..errors import ConfigError
from ..network import EdgeSpec, LayerSpec, conv_unit, init_layer


class OperationKind(IntEnum):
    """The per-edge search space, in tie-break order."""

    NONE = 0
    SKIP = 1
    AVG_POOL = 2
    MAX_POOL = 3
    SEP_CONV = 4
    DIL_CONV = 5

    @property
    def edge_op(self) -> str:
        return _EDGE_OP[self]


_EDGE_OP = {
    OperationKind.NONE: "none",
    OperationKind.SKIP: "skip",
    OperationKind.AVG_POOL: "avg_pool",
    OperationKind.MAX_POOL: "max_pool",
    OperationKind.SEP_CONV: "sep_conv",
    OperationKind.DIL_CONV: "dil_conv",
}

NUM_OPS = len(OperationKind)
OP_NAMES = tuple(k.edge_op for k in OperationKind)


def slot_of(edge_op: str) -> OperationKind:
    """Search slot that hosts an existing edge of kind ``edge_op``.

    A full conv unit has no slot of its own; it occupies the SepConv slot,
    the only learnable-convolution slot whose parameters it can replace.
    """
    if edge_op == "conv":
        return OperationKind.SEP_CONV
    for k, name in _EDGE_OP.items():
        if name == edge_op:
            return k
    raise ConfigError(f"edge op {edge_op!r} has no search slot")


def _dw(name, c, dilation=1):
    g = {"kernel": 3, "stride": 1, "pad": dilation, "dilation": dilation,
         "in_channels": c, "out_channels": c, "groups": c}
    return LayerSpec("conv", name, g, (f"{name}.weight",))


def _pw(name, c):
    g = {"kernel": 1, "stride": 1, "pad": 0, "dilation": 1, "in_channels": c, "out_channels": c, "groups": 1}
    return LayerSpec("conv", name, g, (f"{name}.weight",))


def _ss(name, c):
    return LayerSpec("scale_shift", name, {"channels": c}, (f"{name}.scale", f"{name}.shift"))


def _sep_stage(prefix, c, i, dilation=1):
    return (_dw(f"{prefix}.dw{i}", c, dilation), _pw(f"{prefix}.pw{i}", c), _ss(f"{prefix}.ss{i}", c),
            LayerSpec("relu", f"{prefix}.relu{i}"))


def op_layers(kind: OperationKind | str, prefix: str, channels: int) -> tuple[LayerSpec, ...]:
    """Shape-preserving layer recipe for an edge op at ``channels`` width."""
    name = kind.edge_op if isinstance(kind, OperationKind) else kind
    if name in ("none", "skip"):
        return ()
    if name in ("avg_pool", "max_pool"):
        return (LayerSpec(name, f"{prefix}.pool", {"kernel": 3, "stride": 1, "pad": 1}),)
    if name == "sep_conv":
        return _sep_stage(prefix, channels, 1) + _sep_stage(prefix, channels, 2)
    if name == "dil_conv":
        return _sep_stage(prefix, channels, 1, dilation=2)
    if name == "conv":
        return conv_unit(prefix, channels, channels)
    raise ConfigError(f"unknown edge op {name!r}")


def make_edge(src: int, dst: int, kind: OperationKind | str, prefix: str, channels: int) -> EdgeSpec:
    name = kind.edge_op if isinstance(kind, OperationKind) else kind
    return EdgeSpec(src, dst, name, op_layers(name, prefix, channels))


def init_edge_params(edge: EdgeSpec, rng: np.random.Generator, dtype=np.float32) -> dict:
    out = {}
    for layer in edge.layers:
        out.update(init_layer(layer, rng, dtype))
    return out
