"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array.  Tensors produced by an operation carry a
``Node`` recording their parents and a closure that maps the output gradient
to parent gradients.  ``backward`` walks the recorded graph in reverse
topological order and accumulates gradients into every leaf that has
``requires_grad`` set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NonFiniteError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: BackwardFn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple, backward: BackwardFn) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out.node = Node(op, parents, backward) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the ops module owns the math
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values in result")


@dataclass
class Graph:
    """Operation records of one traced computation, topologically ordered."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def records(self) -> list[tuple[str, list[int]]]:
        index = {id(t): i for i, t in enumerate(self.nodes)}
        out = []
        for t in self.nodes:
            if t.node is None:
                out.append(("leaf", []))
            else:
                out.append((t.node.op, [index[id(p)] for p in t.node.parents if id(p) in index]))
        return out


def trace(root: Tensor) -> Graph:
    """Collect every differentiable tensor feeding ``root``; inputs precede consumers."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at {t!r}")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if not p.requires_grad:
                    continue
                pm = state.get(id(p))
                if pm == 1:
                    raise GraphError(f"cycle detected at {p!r}")
                if pm is None:
                    stack.append((p, False))
    return Graph(nodes=order, outputs=[len(order) - 1])


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise GraphError(f"{t.node.op}: gradient shape {pg.shape} != input shape {p.data.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
