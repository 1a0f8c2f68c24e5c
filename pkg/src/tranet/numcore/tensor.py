"""Dense tensor with reverse-mode gradients.

Every differentiable primitive produces a new :class:`Tensor` that remembers
its parents and a closure computing the vector-Jacobian product.  The graph is
walked in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64
_local = threading.local()
_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """The compute graph cannot be differentiated."""


def set_precision(name: str) -> None:
    """Select the engine precision: ``"float64"`` (verification) or ``"float32"`` (training)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


def get_dtype() -> type:
    return _dtype


def get_precision() -> str:
    return "float64" if _dtype is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A value array, an optional gradient, and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype, copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op: str | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.id = next(_ids)
        out._op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        from tranet.numcore.ops import add

        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from tranet.numcore.ops import mul

        return mul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{label}{op}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class GraphNode:
    __slots__ = ("op", "inputs", "output")

    def __init__(self, op: str, inputs: tuple[int, ...], output: int):
        self.op = op
        self.inputs = inputs
        self.output = output

    def __repr__(self) -> str:
        return f"GraphNode({self.op}, inputs={self.inputs}, output={self.output})"


class ComputeGraph:
    """Recorded primitive applications reachable from one output, in topological order."""

    def __init__(self, tensors: list[Tensor]):
        self._tensors = tensors
        self.nodes = [
            GraphNode(t._op, tuple(p.id for p in t._parents), t.id) for t in tensors if t._parents
        ]

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            t, i = stack.pop()
            if i == 0:
                if state.get(t.id) == 2:
                    continue
                state[t.id] = 1
            if i < len(t._parents):
                stack.append((t, i + 1))
                p = t._parents[i]
                mark = state.get(p.id)
                if mark == 1:
                    raise GraphError(f"cycle detected through op {p._op!r} (tensor {p.id})")
                if mark is None and p.requires_grad:
                    stack.append((p, 0))
            else:
                state[t.id] = 2
                order.append(t)
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors)


def backward(loss: Tensor, graph: ComputeGraph | None = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires a gradient."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires a gradient")
    graph = graph or ComputeGraph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in reversed(graph._tensors):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if not t._parents:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t._backward is None:
            raise GraphError(f"saved activations for op {t._op!r} (tensor {t.id}) were released")
        parent_grads = t._backward(g)
        if not retain_graph:
            t._backward = None
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GraphError(f"op {t._op!r} returned gradient of shape {pg.shape} for input {p.shape}")
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
