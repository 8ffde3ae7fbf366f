"""Continuous relaxation of one block (or one of its edges)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..engine import ops
from ..engine.tensor import Tensor
from ..errors import DegenerateArchitecture, DimensionError, UnsupportedError
from ..network import BlockSpec, EdgeSpec, Network, ParamStore, run_edge, run_layers
from .space import NUM_OPS, OperationKind, init_edge_params, make_edge, slot_of


@dataclass
class MixedEdge:
    src: int  # node indices of the enclosing block
    dst: int
    candidates: tuple[EdgeSpec, ...]  # one per OperationKind, enum order
    inherited: OperationKind | None = None


@dataclass
class SuperBlock:
    """The relaxed region ``start .. start+K`` of block ``block.index``.

    Block mode relaxes the whole interior (``start = 0``); layer mode a
    single edge (``K = 1``). Edges of the block outside the region stay fixed.
    """

    block: BlockSpec
    start: int
    K: int
    edges: list[MixedEdge]
    alphas: Tensor  # (num_edges, NUM_OPS)
    store: ParamStore  # candidate-op parameters
    channels: int
    fixed: tuple[EdgeSpec, ...] = ()
    temperature: float = 1.0
    history: list = field(default_factory=list)

    @property
    def index(self) -> int:
        return self.block.index

    @property
    def num_nodes(self) -> int:
        return self.K + 1

    @property
    def edge_pairs(self) -> list[tuple[int, int]]:
        return [(e.src - self.start, e.dst - self.start) for e in self.edges]

    def weights(self) -> np.ndarray:
        return ops._stable_softmax(self.alphas.data.astype(np.float64), -1, self.temperature)

    def parameters(self) -> list[Tensor]:
        return list(self.store.values())

    def edge_parameters(self, e: int, kind: OperationKind) -> list[Tensor]:
        return [self.store[k] for layer in self.edges[e].candidates[kind].layers for k in layer.keys]

    def copy(self) -> "SuperBlock":
        return replace(self, alphas=Tensor(self.alphas.data.copy(), dtype=self.alphas.dtype),
                       store=self.store.copy(), history=list(self.history))


def _interior_channels(block: BlockSpec, store: ParamStore) -> int:
    for e in block.edges:
        for layer in e.layers:
            if layer.out_channels:
                return int(layer.out_channels)
    for layer in reversed(block.entry):
        if layer.out_channels:
            return int(layer.out_channels)
    raise UnsupportedError(f"block {block.index}: cannot infer the interior channel width")


def _fresh_prefix(block: BlockSpec, src: int, dst: int, op: str, taken) -> str:
    base = f"b{block.index}.e{src}_{dst}.{op}"
    prefix, n = base, 1
    while any(k.startswith(prefix + ".") for k in taken):
        prefix = f"{base}_r{n}"
        n += 1
    return prefix


def relax_block(net: Network, index: int, region: tuple[int, int] | None = None, seed: int = 0,
                dtype=np.float32) -> SuperBlock:
    """Relax block ``index`` into a superblock.

    ``region = (start, K)`` limits the relaxation to nodes ``start..start+K``;
    default is the whole interior. Every node pair in the region gets all
    |O| candidates. An existing edge keeps its parameters in the slot of its
    kind; a pair without an edge counts as None. The original op of every
    pair starts with alpha 1, everything else at 0.
    """
    block = net.spec.block(index)
    if not block.searchable:
        raise UnsupportedError(f"block {index} ({block.role}) has no searchable shape-preserving interior")
    start, K = region if region is not None else (0, block.K)
    if K < 1 or start < 0 or start + K > block.K:
        raise UnsupportedError(f"region start={start} K={K} outside block {index} with K={block.K}")
    c = _interior_channels(block, net.store)
    rng = np.random.default_rng([seed, index, start])
    lo, hi = start, start + K
    existing = {(e.src, e.dst): e for e in block.edges if lo <= e.src and e.dst <= hi}
    fixed = tuple(e for e in block.edges if (e.src, e.dst) not in existing)
    taken = set(net.store)
    store = ParamStore()
    edges = []
    alphas = np.zeros((K * (K + 1) // 2, NUM_OPS), dtype=dtype)
    for i in range(lo, hi):
        for j in range(i + 1, hi + 1):
            old = existing.get((i, j))
            slot = slot_of(old.op) if old is not None else None
            cands = []
            for kind in OperationKind:
                if kind == slot:
                    cands.append(old)
                    for layer in old.layers:
                        for k in layer.keys:
                            store[k] = Tensor(net.store[k].data.copy(), name=k, dtype=dtype)
                    continue
                prefix = _fresh_prefix(block, i, j, kind.edge_op, taken)
                edge = make_edge(i, j, kind, prefix, c)
                taken.update(k for layer in edge.layers for k in layer.keys)
                store.update(init_edge_params(edge, rng, dtype))
                cands.append(edge)
            # a pair without an edge is a None edge of the original block
            alphas[len(edges), OperationKind.NONE if slot is None else slot] = 1.0
            edges.append(MixedEdge(i, j, tuple(cands), slot))
    return SuperBlock(block, start, K, edges, Tensor(alphas, name=f"b{index}.alpha", dtype=dtype), store, c, fixed)


def mixed_edge_forward(x: Tensor, alpha: Tensor, candidates, store: ParamStore, temperature: float = 1.0,
                       weights: Tensor | None = None) -> Tensor:
    """Σ_o softmax(alpha)_o · o(x) over the candidate edges."""
    w = ops.softmax(alpha, axis=-1, temperature=temperature) if weights is None else weights
    if len(candidates) != w.shape[-1]:
        raise DimensionError(f"{len(candidates)} candidate ops for {w.shape[-1]} mixture weights", axis="ops")
    out = None
    for o, cand in enumerate(candidates):
        if cand.op == "none":
            continue
        y = run_edge(cand, x, store)
        if y.shape != x.shape:
            raise DimensionError(f"op {cand.op} changed shape {x.shape} -> {y.shape}", axis="shape")
        term = ops.mul(y, ops.index(w, o))
        out = term if out is None else ops.add(out, term)
    if out is None:
        return ops.mul(x, Tensor(np.zeros((), x.dtype)))
    return out


def superblock_forward(sb: SuperBlock, x: Tensor, net: Network, entry: bool = True) -> Tensor:
    """Run the relaxed block on the block input ``x``.

    Node j sums every incoming mixed edge and every fixed edge; the block
    shortcut (node 0) is added at the end when the block is residual.
    """
    block = sb.block
    h = run_layers(block.entry, x, net.store) if entry else x
    w = ops.softmax(sb.alphas, axis=-1, temperature=sb.temperature)
    nodes: list[Tensor | None] = [h] + [None] * block.K
    for j in range(1, block.num_nodes):
        acc = None
        for e in sb.fixed:
            if e.dst == j and nodes[e.src] is not None:
                y = run_edge(e, nodes[e.src], net.store)
                acc = y if acc is None else ops.add(acc, y)
        for ei, me in enumerate(sb.edges):
            if me.dst == j and nodes[me.src] is not None:
                y = mixed_edge_forward(nodes[me.src], None, me.candidates, sb.store, weights=ops.index(w, ei))
                acc = y if acc is None else ops.add(acc, y)
        nodes[j] = acc
    out = nodes[-1]
    if out is None:
        raise DimensionError(f"block {block.index}: output node has no incoming edge", axis="graph")
    return ops.add(out, nodes[0]) if block.residual else out


def supernet_forward(net: Network, sb: SuperBlock, batch, from_block_input: bool = False) -> Tensor:
    """Logits with the superblock standing in for its block.

    With ``from_block_input`` the batch is the (cached) output of the blocks
    before the target, which stay frozen and need not be recomputed.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if not from_block_input:
        net.check_input(x)
        x = net.run_blocks(x, 1, sb.index - 1)
    h = superblock_forward(sb, x, net)
    return net.run_blocks(h, sb.index + 1)


def block_input(net: Network, index: int, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Features entering block ``index`` (the frozen prefix output)."""
    outs = [net.run_blocks(Tensor(images[i : i + batch_size]), 1, index - 1).data
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,), np.float32)


# ---------------------------------------------------------------------------
# discretization

@dataclass
class Discretized:
    block: BlockSpec
    store: ParamStore  # parameters of the new block only, in layer order
    chosen: dict[tuple[int, int], str]


def choose_ops(sb: SuperBlock) -> list[OperationKind]:
    """argmax per edge; equal alphas resolve to the first kind in enum order."""
    return [OperationKind(int(np.argmax(row))) for row in sb.alphas.data]


def _prune(edges: list[EdgeSpec], num_nodes: int) -> tuple[list[EdgeSpec], list[int]]:
    alive = set(range(num_nodes))
    while True:
        fed = {0} | {e.dst for e in edges if e.src in alive}
        drop = {n for n in alive if n not in fed}
        if not drop:
            break
        alive -= drop
        edges = [e for e in edges if e.src in alive and e.dst in alive]
    return edges, sorted(alive)


def discretize(sb: SuperBlock, net: Network, choice: list[OperationKind] | None = None) -> Discretized:
    """Concrete block from the per-edge argmax ops.

    None edges vanish, nodes left without input are pruned with their
    outgoing edges, and the surviving nodes are renumbered in order.
    """
    choice = choose_ops(sb) if choice is None else choice
    block = sb.block
    chosen = {}
    edges = list(sb.fixed)
    for me, kind in zip(sb.edges, choice):
        chosen[(me.src, me.dst)] = me.candidates[kind].op
        if kind != OperationKind.NONE:
            edges.append(me.candidates[kind])
    edges, alive = _prune(edges, block.num_nodes)
    if block.K not in alive:
        raise DegenerateArchitecture(
            f"block {block.index}: every path to the output node was discretized away; "
            "keep the original block instead")
    remap = {n: i for i, n in enumerate(alive)}
    edges = sorted((replace(e, src=remap[e.src], dst=remap[e.dst]) for e in edges), key=lambda e: (e.dst, e.src))
    new_block = replace(block, edges=tuple(edges), num_nodes=len(alive))
    store = ParamStore()
    for layer in new_block.layers:
        for k in layer.keys:
            src = sb.store[k] if k in sb.store else net.store[k]
            store[k] = Tensor(src.data.astype(np.float32, copy=True), name=k, dtype=np.float32)
    return Discretized(new_block, store, chosen)


def install_block(net: Network, block: BlockSpec, block_store: ParamStore) -> Network:
    """New network with ``block`` replacing its namesake; other tensors copied."""
    spec = net.spec.with_block(block)
    store = ParamStore()
    for b in spec.blocks:
        for layer in b.layers:
            for k in layer.keys:
                src = block_store[k] if b.index == block.index else net.store[k]
                store[k] = Tensor(src.data.copy(), name=k, dtype=src.dtype)
    return Network(spec, store)


def effective_ops(sb: SuperBlock, choice: list[OperationKind] | None = None) -> list[OperationKind]:
    """``choice`` with edges leaving input-less nodes turned into None.

    These are the edges discretization prunes. Left in place they would
    still add op(0), which is nonzero once an op carries a shift.
    """
    choice = list(choose_ops(sb) if choice is None else choice)
    live = [e for e, kind in zip(sb.edges, choice) if kind != OperationKind.NONE]
    _, alive = _prune(list(sb.fixed) + [me.candidates[OperationKind.SKIP] for me in live], sb.block.num_nodes)
    return [kind if me.src in alive else OperationKind.NONE for me, kind in zip(sb.edges, choice)]


def one_hot_superblock(sb: SuperBlock, choice: list[OperationKind] | None = None) -> SuperBlock:
    """Copy of ``sb`` whose mixture weights are exactly one-hot on ``choice``.

    Pruned edges are put on None, so the result computes the same function
    as the discretized block.
    """
    choice = effective_ops(sb, choice)
    out = sb.copy()
    a = np.full(sb.alphas.shape, -1e30, dtype=np.float64)
    for e, kind in enumerate(choice):
        a[e, kind] = 0.0
    out.alphas = Tensor(a.astype(sb.alphas.dtype), dtype=sb.alphas.dtype)
    out.temperature = 1.0
    return out
