"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray, remembers which tensors produced it,
and carries a closure that pushes its gradient to those parents. Calling
``backward()`` on a scalar output walks the graph once in reverse
topological order. Works in float32 (training) and float64
(finite-difference verification) alike; the dtype of the inputs decides.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class Tensor:
    """A node in the computation graph.

    ``data`` is the value, ``grad`` accumulates d(output)/d(this) during
    backward and is None until then. Leaf tensors have no parents.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        parents: Iterable["Tensor"] = (),
        backward: Callable[[], None] | None = None,
        dtype=None,
    ):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

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
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar-valued tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Elementwise combination of loss terms; heavier primitives live in ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("can only add Tensor to Tensor")
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch in add: {self.shape} vs {other.shape}")
        out = Tensor(self.data + other.data, (self, other))

        def bw():
            self.accumulate_grad(out.grad)
            other.accumulate_grad(out.grad)

        out._backward = bw
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("can only subtract Tensor from Tensor")
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch in subtract: {self.shape} vs {other.shape}")
        out = Tensor(self.data - other.data, (self, other))

        def bw():
            self.accumulate_grad(out.grad)
            other.accumulate_grad(-out.grad)

        out._backward = bw
        return out

    def __mul__(self, scalar: float) -> "Tensor":
        c = float(scalar)
        out = Tensor(self.data * c, (self,))

        def bw():
            self.accumulate_grad(out.grad * c)

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A trainable leaf tensor with a name unique within its model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; parents appear before children in the result.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
