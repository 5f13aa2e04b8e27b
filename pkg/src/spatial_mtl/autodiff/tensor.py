"""Tensor and gradient tape.

Every differentiable op in :mod:`spatial_mtl.autodiff.ops` records a node on
the active :class:`Tape`. ``backward`` walks that tape in reverse, so the
traversal order is simply the recording order and each node is visited once.
Outside a tape ops run eagerly without recording (inference mode).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Op parameters produce an invalid geometry."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (double backward, detached loss, ...)."""


def default_dtype() -> type:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage dtype of newly created tensors.

    ``precision(np.float64)`` is the 64-bit mode used by gradient checks.
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE.append(dtype)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs: tuple[Tensor, ...] = inputs
        self.output: Tensor = output
        self.backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside record themselves here.
    A tape supports exactly one :meth:`backward`; call :meth:`reset` to reuse.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output._node = None
        self.nodes = []
        self.consumed = False

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that already ran backward; reset() it first")
        output._node = len(self.nodes)
        output._tape = self
        output.requires_grad = True
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss._node is None:
            raise TapeError("loss was not produced on this tape (detached)")
        if self.consumed:
            raise TapeError("backward() already ran on this tape; reset() before a second call")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched_leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if not t.requires_grad:
                    continue
                if t._node is None:
                    touched_leaves[id(t)] = t
                    if gi is None:
                        continue
                    gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif gi is not None:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        for t in touched_leaves.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf feeding ``loss``."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss has no tape; run the forward pass inside `with Tape():`")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op output and record it when any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._node = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out
