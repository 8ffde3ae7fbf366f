"""Block-structured classifiers.

A network is an ordered list of blocks. Every block is an optional entry
transform followed by a small DAG: node 0 is the entry output, node ``j``
sums the edge outputs from its predecessors, and the block output is node
``K`` (plus node 0 when the block is residual). A plain sequential block is
the chain of edges ``(0, 1), (1, 2), ...``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .engine import ops
from .engine.tensor import DEFAULT_DTYPE, Tensor
from .errors import ConfigError, DimensionError

NEURON_KINDS = ("conv", "linear")
ELEMENTWISE_KINDS = ("scale_shift", "relu")
LAYER_KINDS = NEURON_KINDS + ELEMENTWISE_KINDS + ("max_pool", "avg_pool", "global_avg_pool", "residual_add")
EDGE_OPS = ("conv", "none", "skip", "avg_pool", "max_pool", "sep_conv", "dil_conv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    geometry: dict = field(default_factory=dict)
    keys: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def out_channels(self) -> int | None:
        return self.geometry.get("out_channels", self.geometry.get("channels"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "geometry": dict(sorted(self.geometry.items())), "keys": list(self.keys)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d["name"], dict(d["geometry"]), tuple(d["keys"]))


@dataclass(frozen=True)
class EdgeSpec:
    src: int
    dst: int
    op: str
    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        if self.op not in EDGE_OPS:
            raise ConfigError(f"unknown edge op {self.op!r}")
        if not 0 <= self.src < self.dst:
            raise ConfigError(f"edge ({self.src}, {self.dst}) is not forward")

    def to_dict(self) -> dict:
        return {"src": self.src, "dst": self.dst, "op": self.op, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeSpec":
        return cls(d["src"], d["dst"], d["op"], tuple(LayerSpec.from_dict(l) for l in d["layers"]))


@dataclass(frozen=True)
class BlockSpec:
    index: int
    role: str  # stem | stage | head
    entry: tuple[LayerSpec, ...] = ()
    edges: tuple[EdgeSpec, ...] = ()
    num_nodes: int = 1
    residual: bool = False

    @property
    def K(self) -> int:
        return self.num_nodes - 1

    @property
    def searchable(self) -> bool:
        return self.role == "stage" and self.K >= 1

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        out = list(self.entry)
        for e in self.edges:
            out.extend(e.layers)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "index": self.index, "role": self.role, "entry": [l.to_dict() for l in self.entry],
            "edges": [e.to_dict() for e in self.edges], "num_nodes": self.num_nodes, "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(
            d["index"], d["role"], tuple(LayerSpec.from_dict(l) for l in d["entry"]),
            tuple(EdgeSpec.from_dict(e) for e in d["edges"]), d["num_nodes"], d["residual"],
        )


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]
    width: int = 16

    @property
    def B(self) -> int:
        return len(self.blocks)

    def block(self, index: int) -> BlockSpec:
        """Block by its 1-based index."""
        if not 1 <= index <= self.B:
            raise ConfigError(f"block index {index} out of range 1..{self.B}")
        return self.blocks[index - 1]

    def with_block(self, block: BlockSpec) -> "NetworkSpec":
        blocks = list(self.blocks)
        blocks[block.index - 1] = block
        return replace(self, blocks=tuple(blocks))

    def to_dict(self) -> dict:
        return {
            "blocks": [b.to_dict() for b in self.blocks], "num_classes": self.num_classes,
            "input_shape": list(self.input_shape), "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(BlockSpec.from_dict(b) for b in d["blocks"]), d["num_classes"], tuple(d["input_shape"]), d["width"])


class ParamStore(dict):
    """Parameter key -> Tensor, in layer-traversal order."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.copy(), name=k, dtype=v.dtype) for k, v in self.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.values()))


@dataclass(frozen=True, order=True)
class NeuronId:
    block: int
    layer: int
    channel: int


@dataclass
class ActivationTrace:
    flags: np.ndarray  # (N, num_neurons) bool
    predicted: np.ndarray
    labels: np.ndarray | None = None


# ---------------------------------------------------------------------------
# construction

def _conv(name, cin, cout, k=3, stride=1, pad=1, dilation=1, groups=1):
    g = {"kernel": k, "stride": stride, "pad": pad, "dilation": dilation,
         "in_channels": cin, "out_channels": cout, "groups": groups}
    return LayerSpec("conv", name, g, (f"{name}.weight",))


def _ss(name, c):
    return LayerSpec("scale_shift", name, {"channels": c}, (f"{name}.scale", f"{name}.shift"))


def _relu(name):
    return LayerSpec("relu", name)


def conv_unit(prefix: str, cin: int, cout: int, stride: int = 1) -> tuple[LayerSpec, ...]:
    """conv 3x3 -> per-channel scale/shift -> relu."""
    return (_conv(f"{prefix}.conv", cin, cout, stride=stride), _ss(f"{prefix}.ss", cout), _relu(f"{prefix}.relu"))


def sequential_edges(prefix: str, channels: int, k: int) -> tuple[EdgeSpec, ...]:
    return tuple(EdgeSpec(i, i + 1, "conv", conv_unit(f"{prefix}.e{i}_{i + 1}", channels, channels)) for i in range(k))


def build_mini_resnet(width: int = 16, num_classes: int = 10, input_shape=(3, 32, 32), seed: int = 0) -> "Network":
    """Five-block residual classifier.

    Blk1 stem conv; Blk2 two convs at ``width`` with a shortcut; Blk3/Blk4 a
    stride-2 channel-doubling entry conv followed by two residual convs; Blk5
    global average pool + linear head.
    """
    if width < 4:
        raise ConfigError(f"width must be >= 4, got {width}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    cin = input_shape[0]
    w1, w2, w3 = width, 2 * width, 4 * width
    blocks = (
        BlockSpec(1, "stem", conv_unit("b1.entry", cin, w1)),
        BlockSpec(2, "stage", (), sequential_edges("b2", w1, 2), 3, True),
        BlockSpec(3, "stage", conv_unit("b3.entry", w1, w2, stride=2), sequential_edges("b3", w2, 2), 3, True),
        BlockSpec(4, "stage", conv_unit("b4.entry", w2, w3, stride=2), sequential_edges("b4", w3, 2), 3, True),
        BlockSpec(5, "head", (
            LayerSpec("global_avg_pool", "b5.pool"),
            LayerSpec("linear", "b5.fc", {"in_features": w3, "out_features": num_classes},
                      ("b5.fc.weight", "b5.fc.bias")),
        )),
    )
    spec = NetworkSpec(blocks, num_classes, tuple(input_shape), width)
    return Network(spec, init_params(spec, seed))


def layer_param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    g = layer.geometry
    if layer.kind == "conv":
        return {layer.keys[0]: (g["out_channels"], g["in_channels"] // g["groups"], g["kernel"], g["kernel"])}
    if layer.kind == "scale_shift":
        return {layer.keys[0]: (g["channels"],), layer.keys[1]: (g["channels"],)}
    if layer.kind == "linear":
        return {layer.keys[0]: (g["out_features"], g["in_features"]), layer.keys[1]: (g["out_features"],)}
    return {}


def init_layer(layer: LayerSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> dict[str, Tensor]:
    """Kaiming-uniform fan-in weights, zero bias/shift, unit scale."""
    out = {}
    for i, (key, shape) in enumerate(layer_param_shapes(layer).items()):
        if layer.kind == "scale_shift":
            arr = np.ones(shape) if i == 0 else np.zeros(shape)
        elif i == 0:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        out[key] = Tensor(arr, name=key, dtype=dtype)
    return out


def init_params(spec: NetworkSpec, seed: int = 0, dtype=DEFAULT_DTYPE) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for block in spec.blocks:
        for layer in block.layers:
            store.update(init_layer(layer, rng, dtype))
    return store


# ---------------------------------------------------------------------------
# execution

class _Tracer:
    """Collects per-channel activation maxima for neuron-bearing layers."""

    def __init__(self):
        self.values: dict[tuple[int, int], np.ndarray] = {}
        self.pending: tuple[int, int] | None = None
        self.last: np.ndarray | None = None

    def flush(self):
        if self.pending is not None:
            v = self.last
            self.values[self.pending] = v.max(axis=(2, 3)) if v.ndim == 4 else v
        self.pending = None
        self.last = None


def apply_layer(layer: LayerSpec, x: Tensor, store: ParamStore) -> Tensor:
    g = layer.geometry
    k = layer.kind
    if k == "conv":
        return ops.conv2d(x, store[layer.keys[0]], g["stride"], g["pad"], g["dilation"], g["groups"])
    if k == "scale_shift":
        return ops.channel_affine(x, store[layer.keys[0]], store[layer.keys[1]])
    if k == "relu":
        return ops.relu(x)
    if k == "max_pool":
        return ops.max_pool2d(x, g["kernel"], g["stride"], g["pad"])
    if k == "avg_pool":
        return ops.avg_pool2d(x, g["kernel"], g["stride"], g["pad"])
    if k == "global_avg_pool":
        return ops.global_avg_pool(x)
    if k == "linear":
        return ops.linear(x, store[layer.keys[0]], store[layer.keys[1]])
    raise ConfigError(f"layer kind {k!r} cannot be applied on its own")


def run_layers(layers: Sequence[LayerSpec], x: Tensor, store: ParamStore, tracer: _Tracer | None = None,
               block: int = 0, offset: int = 0) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = apply_layer(layer, h, store)
        if tracer is None:
            continue
        if layer.kind in NEURON_KINDS:
            tracer.flush()
            tracer.pending = (block, offset + i)
        if tracer.pending is not None:
            tracer.last = h.data
    if tracer is not None:
        tracer.flush()
    return h


def run_edge(edge: EdgeSpec, x: Tensor, store: ParamStore, tracer=None, block=0, offset=0) -> Tensor:
    if edge.op == "none":
        return ops.mul(x, Tensor(np.zeros((), x.dtype)))
    return run_layers(edge.layers, x, store, tracer, block, offset)


def run_block(block: BlockSpec, x: Tensor, store: ParamStore, tracer: _Tracer | None = None) -> Tensor:
    h = run_layers(block.entry, x, store, tracer, block.index, 0)
    if block.K == 0:
        return h
    nodes: list[Tensor | None] = [h] + [None] * block.K
    offset = len(block.entry)
    offsets = []
    for e in block.edges:
        offsets.append(offset)
        offset += len(e.layers)
    for j in range(1, block.num_nodes):
        acc = None
        for e, off in zip(block.edges, offsets):
            if e.dst != j or nodes[e.src] is None:
                continue
            y = run_edge(e, nodes[e.src], store, tracer, block.index, off)
            acc = y if acc is None else ops.add(acc, y)
        nodes[j] = acc
    out = nodes[-1]
    if out is None:
        raise DimensionError(f"block {block.index}: output node has no incoming edge", axis="graph")
    return ops.add(out, nodes[0]) if block.residual else out


class Network:
    """Architecture spec plus its parameter store."""

    def __init__(self, spec: NetworkSpec, store: ParamStore):
        self.spec = spec
        self.store = store

    def check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"input shape {tuple(x.shape[1:])} != expected {tuple(self.spec.input_shape)}",
                                 axis="input")

    def run_blocks(self, x: Tensor, start: int = 1, stop: int | None = None, tracer=None) -> Tensor:
        """Run blocks ``start..stop`` (1-based, inclusive)."""
        stop = self.spec.B if stop is None else stop
        h = x
        for block in self.spec.blocks[start - 1 : stop]:
            h = run_block(block, h, self.store, tracer)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        return self.run_blocks(x)

    def forward_with_trace(self, x, threshold: float = 0.0) -> tuple[Tensor, ActivationTrace]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        tracer = _Tracer()
        logits = self.run_blocks(x, tracer=tracer)
        cols = [tracer.values[(n.block, n.layer)][:, n.channel] for n in enumerate_neurons(self.spec)]
        flags = np.stack(cols, axis=1) > threshold if cols else np.zeros((x.shape[0], 0), bool)
        return logits, ActivationTrace(flags, logits.data.argmax(axis=1))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(Tensor(images[i : i + batch_size])).data.argmax(axis=1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        if len(labels) == 0:
            return float("nan")
        return float((self.predict(images, batch_size) == np.asarray(labels)).mean())

    def block_params(self, index: int) -> list[Tensor]:
        return [self.store[k] for layer in self.spec.block(index).layers for k in layer.keys]

    def parameters(self) -> list[Tensor]:
        return list(self.store.values())

    def copy(self) -> "Network":
        return Network(self.spec, self.store.copy())

    def num_parameters(self) -> int:
        return self.store.num_parameters()


def forward(net: Network, batch) -> Tensor:
    return net.forward(batch)


def forward_with_trace(net: Network, batch, activation_threshold: float = 0.0):
    return net.forward_with_trace(batch, activation_threshold)


def enumerate_neurons(spec: NetworkSpec) -> list[NeuronId]:
    """Every conv output channel and linear output unit, in block/layer order."""
    out = []
    for block in spec.blocks:
        for li, layer in enumerate(block.layers):
            if layer.kind in NEURON_KINDS:
                n = layer.geometry["out_channels"] if layer.kind == "conv" else layer.geometry["out_features"]
                out.extend(NeuronId(block.index, li, c) for c in range(n))
    return out


def block_of(neuron: NeuronId) -> int:
    return neuron.block


def neuron_block_indices(spec: NetworkSpec) -> np.ndarray:
    return np.array([n.block for n in enumerate_neurons(spec)], dtype=np.int64)


def neuron_layer(spec: NetworkSpec, neuron: NeuronId) -> LayerSpec:
    return spec.block(neuron.block).layers[neuron.layer]


def iter_neuron_layers(spec: NetworkSpec) -> Iterator[tuple[int, int, LayerSpec]]:
    for block in spec.blocks:
        for li, layer in enumerate(block.layers):
            if layer.kind in NEURON_KINDS:
                yield block.index, li, layer


def train_network(net: Network, train, val=None, config=None, params: Sequence[Tensor] | None = None):
    """Train ``params`` (default: all) of ``net`` in place; others stay frozen."""
    from .engine.train import TrainConfig, train_loop

    config = config or TrainConfig()
    params = list(net.parameters() if params is None else params)
    chosen = {p.id for p in params}
    for p in net.parameters():
        p.requires_grad = p.id in chosen
    try:
        return train_loop(net.forward, params, train, val, config)
    finally:
        for p in net.parameters():
            p.requires_grad = False
