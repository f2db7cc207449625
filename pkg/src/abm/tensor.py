"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array.  Every differentiable primitive in
:mod:`abm.ops` that receives at least one tensor with ``requires_grad`` set
appends a :class:`Node` to the thread's current :class:`Tape`.  Calling
:func:`backward` walks the tape in reverse, accumulates ``.grad`` on the
leaves and clears the tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Backward was asked for something the tape never recorded."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A masked reduction had no unmasked element to work with."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where it must not."""


class Node:
    __slots__ = ("inputs", "output", "backward", "tape", "generation")

    def __init__(self, inputs, output, backward, tape, generation):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape
        self.generation = generation


class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, so the list is already a
    topological order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output, backward) -> Node:
        node = Node(inputs, output, backward, self, self.generation)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes = []
        self.generation += 1


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def fresh_tape():
    """Run a block against a private tape (restored afterwards)."""
    prev = getattr(_local, "tape", None)
    _local.tape = Tape()
    try:
        yield _local.tape
    finally:
        _local.tape.clear()
        _local.tape = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --- operator sugar (implemented in abm.ops) ----------------------
    def __add__(self, other):
        from abm import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from abm import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from abm import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from abm import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from abm import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from abm import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from abm import ops
        return ops.div(self, other)

    def __neg__(self):
        from abm import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from abm import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from abm import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from abm import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from abm import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from abm import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from abm import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed."""
    out = Tensor(data)
    if grad_enabled():
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out.node = current_tape().record(tuple(inputs), out, backward_fn)
                break
    return out


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` of every leaf that influenced ``loss``.

    Leaf gradients accumulate into any existing ``.grad``.  Tensors listed in
    ``params`` that did not participate receive a zero gradient.
    """
    tape = current_tape()
    node = loss.node
    if node is None or node.tape is not tape or node.generation != tape.generation:
        raise TapeError("backward() called on a tensor that was not produced by the current tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        in_grads = nd.backward(g)
        for t, gi in zip(nd.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)
