"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive op checks its output for NaN/Inf and records itself on the
active :class:`Tape` when any input requires a gradient. Backward replays
the tape in exact reverse order. Without an active tape nothing is
recorded, which is how inference runs.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "shadowpeft_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Row-major array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None, retain_graph: bool = False) -> None:
        if self._node is None or self._node.tape is None:
            raise RuntimeError("tensor was not produced under an active Tape, or its graph was released")
        self._node.tape.backward(self, grad, retain_graph)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=like.dtype)


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "op", "tape")

    def __init__(self, inputs, output, backward_fn, op, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op
        self.tape = tape


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside are recorded here. A tape
    belongs to one thread of execution.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output: Tensor, backward_fn, op: str) -> None:
        node = Node(inputs, output, backward_fn, op, self)
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        The recorded graph is released afterwards unless ``retain_graph`` is
        set. Nodes and their outputs reference each other, so a kept graph
        would otherwise wait for the cycle collector while holding every
        activation of the step.
        """
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs an explicit grad for non-scalar output {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    leaves[id(t)] = t
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        if not retain_graph:
            self.release()

    def release(self) -> None:
        """Drop the recorded graph; recorded outputs become plain leaves."""
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _emit(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    res = Tensor(out, dtype=out.dtype)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        tape.record(tuple(inputs), res, backward_fn, op)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


from .ops import add, matmul, mul, scale, sub  # noqa: E402  (operator sugar)
