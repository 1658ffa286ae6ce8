"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the networks is a :class:`Tensor` wrapping a
contiguous ``float64`` ndarray.  Operations (see :mod:`voxelcycle.ops`)
record their inputs and a backward closure on the output tensor; calling
:meth:`Tensor.backward` on a scalar loss walks that implicit tape once in
reverse topological order and accumulates gradients into every tensor that
requires them.  Gradients add up across repeated backward calls until
:meth:`Tensor.zero_grad` resets them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite elements")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def result(data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        """Wrap an op output, linking it into the tape when grads are live."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out.op = op
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ----------------------------------------------------

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data cut loose from the tape."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded tape.

        Visits each node exactly once in reverse topological order; leaf
        gradients accumulate, so repeated calls without zero_grad add up.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- minimal arithmetic (objective assembly only) --------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.shape != other.shape:
            raise ShapeError(f"add: shape mismatch {self.shape} vs {other.shape}")
        out = Tensor.result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self.accumulate_grad(out.grad)
                if other.requires_grad:
                    other.accumulate_grad(out.grad)
            out._backward = _backward
        return out

    def __mul__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            return NotImplemented
        s = float(scalar)
        out = Tensor.result(self.data * s, (self,), "scale")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad * s)
            out._backward = _backward
        return out

    __rmul__ = __mul__


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS producing parents-before-children order."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Filter an iterable down to grad-requiring leaf tensors."""
    return [t for t in tensors if t.requires_grad and not t._parents]
