"""Tensor value type and the reverse-mode engine.

Every differentiable op produces a `Tensor` whose ``_parents`` are the inputs
that require gradients and whose ``_backward`` maps the output gradient to one
gradient per parent.  `backward` walks the recorded graph once, in reverse
topological order, and leaves dLoss/dLeaf in ``leaf.grad``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class GraphError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op: Optional[str] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implementations live in ops) ----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording graph edges when any parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    out._op = op
    rg = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` (inputs first); each appears exactly once."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so the first parent is expanded first; keeps order deterministic
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf that requires grad.

    The interior of the graph is released afterwards; a second call on the same
    graph raises `GraphError`.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")
    if loss._parents and loss._backward is None:
        raise GraphError("graph already consumed by a previous backward(); run forward again")

    order = topological_order(loss)
    for node in order:
        if node._parents and node._backward is None:
            raise GraphError("graph already consumed by a previous backward(); run forward again")

    grads: dict = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if not node._parents:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        fn = node._backward
        node._backward = None
        if g is None:
            continue
        parent_grads = fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
