"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps one contiguous float array (float32 by default; float64
when a gradient check runs the graph in shadow precision).  Operations on
tensors record ``OpNode`` entries; ``Tensor.backward`` replays them in
reverse topological order, accumulating gradient contributions with ``+=``.

Tensors are treated as immutable once an op has produced them: ops never
write into their inputs' buffers, and graph outputs own freshly allocated
arrays.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class OpNode:
    """One recorded operation: its inputs and a backward closure.

    ``backward`` maps the output gradient to per-input gradient arrays
    (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(
        self,
        op: str,
        inputs: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """Dense multi-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "node", "requires_grad", "_im2col_cache")

    def __init__(self, data, requires_grad: bool = False, node: OpNode | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node = node
        self.requires_grad = requires_grad or node is not None
        self._im2col_cache = None  # (key, col) reuse for convs sharing this input

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(graph) into the ``grad`` slots of the graph.

        ``seed`` defaults to ones; pass e.g. ``1/batch`` to scale a loss
        contribution.  Leaf gradients accumulate across calls on separate
        graphs that share the same leaves (the batching pattern).
        """
        if seed is None:
            seed_arr = np.ones(self.shape, dtype=self.dtype)
        else:
            seed_arr = np.asarray(seed, dtype=self.dtype)
            if seed_arr.ndim == 0:
                seed_arr = np.full(self.shape, float(seed_arr), dtype=self.dtype)
            elif seed_arr.shape != self.shape:
                raise ShapeError(
                    f"backward seed shape {seed_arr.shape} != tensor shape {self.shape}"
                )

        _accumulate(self, seed_arr)
        for t in _topological_order(self):
            if t.node is None or t.grad is None:
                continue
            contributions = t.node.backward(t.grad)
            for inp, contrib in zip(t.node.inputs, contributions):
                if contrib is not None and inp.requires_grad:
                    _accumulate(inp, contrib)

    def __repr__(self) -> str:
        tag = self.node.op if self.node else ("param" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {tag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``; every consumer precedes its inputs."""
    post: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            post.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
    post.reverse()
    return post


def parameter(data) -> Tensor:
    """Leaf tensor that participates in gradient accumulation."""
    return Tensor(np.array(data, dtype=np.float32, copy=True), requires_grad=True)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
