"""Tensor value type and the tape that records primitive applications.

Recording only happens inside an active ``Tape`` context and only for ops
with at least one input that requires a gradient, so plain inference runs
allocate nothing beyond the output arrays.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from ..errors import NumericFailure, UsageError

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)


class Tensor:
    """Dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the primitives live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def _raise_item(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


@dataclass(frozen=True)
class Primitive:
    """A differentiable op: ``forward(*arrays, **attrs) -> (out, ctx)`` and
    ``backward(ctx, grad_out) -> tuple of input grads (None = no grad)``."""

    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], tuple]


@dataclass
class Node:
    prim: Primitive
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    ctx: Any


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op name, input ids, output id) per recorded application."""
        return [(n.prim.name, tuple(t.id for t in n.inputs), n.output.id) for n in self.nodes]

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the current leaf values."""
        env: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            arrays = [env.get(t.id, t.data) for t in node.inputs]
            out, _ = node.prim.forward(*arrays, **node.attrs)
            env[node.output.id] = out
            outs.append(out)
        return outs

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        backward(self, loss, params)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def apply(prim: Primitive, *inputs: Tensor, **attrs) -> Tensor:
    out_data, ctx = prim.forward(*(t.data for t in inputs), **attrs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.nodes.append(Node(prim, inputs, out, attrs, ctx))
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-mode sweep over ``tape`` from the scalar ``loss``.

    Every leaf reached gets its ``grad`` overwritten. Tensors listed in
    ``params`` that the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericFailure(f"non-finite loss {loss.data.reshape(-1)[0]!r}")
    produced = {n.output.id for n in tape.nodes}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = node.prim.backward(node.ctx, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            if t.id not in produced:
                leaves[t.id] = t
    for tid, t in leaves.items():
        t.grad = grads[tid].astype(t.dtype, copy=False)
    if loss.id not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    if params is not None:
        for p in params:
            if p.id not in leaves and p is not loss:
                p.grad = np.zeros_like(p.data)
