"""Tensors, parameters and the differentiation tape.

Differentiable ops run eagerly on numpy float64 arrays.  When a :class:`Tape`
is active and at least one input requires a gradient, the op appends a node
holding its backward closure; :meth:`Tape.gradients` walks those nodes in
exact reverse order and accumulates gradients additively at fan-out.
"""
from __future__ import annotations

import itertools
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape mismatch or non-finite value."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_tape_ids = itertools.count(1)
_active_tapes: list["Tape"] = []
_active_meters: list["MemoryMeter"] = []


class MemoryMeter:
    """High-water mark of live array bytes allocated while the meter is active.

    Every tensor payload and every buffer an op saves for backward is
    registered once; its bytes are released when the array is garbage
    collected.  A view is charged to the buffer that owns its storage, and
    each buffer is charged once.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._seen: set[int] = set()

    def track(self, arr: np.ndarray) -> None:
        while not arr.flags.owndata and isinstance(arr.base, np.ndarray):
            arr = arr.base
        key = id(arr)
        if not arr.flags.owndata or arr.nbytes == 0 or key in self._seen:
            return
        n = arr.nbytes
        self._seen.add(key)
        self.live += n
        if self.live > self.peak:
            self.peak = self.live
        weakref.finalize(arr, self._release, key, n)

    def _release(self, key: int, n: int) -> None:
        self._seen.discard(key)
        self.live -= n

    def __enter__(self) -> "MemoryMeter":
        _active_meters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_meters.remove(self)


def track(arr: np.ndarray) -> np.ndarray:
    """Register ``arr`` with every active meter and return it."""
    for m in _active_meters:
        m.track(arr)
    return arr


class Tensor:
    """Dense float64 array, shape ``(H, W, C)`` or ``(N, H, W, C)`` for feature maps."""

    __slots__ = ("data", "requires_grad", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise TensorError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        if _active_meters:
            track(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, optionally frozen tensor owned by a model."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(value, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside the block are recorded.
    A tape is owned by one thread at a time.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Reverse pass from a scalar ``loss``.

        Returns gradients for leaf tensors that require grad (or for ``wrt``
        when given).  The tape is cleared afterwards so saved buffers are freed.
        """
        if loss.tape_id != self.id:
            raise TapeError("loss was not produced on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self.nodes.clear()
        if wrt is None:
            return {t: grads[k] for k, t in leaves.items()}
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; attach ``backward`` to the active tape if needed.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _active_tapes:
        tape = _active_tapes[-1]
        tape.nodes.append(_Node(out, tuple(inputs), backward))
        out.tape_id = tape.id
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Gradient per parameter name; frozen parameters get exact zeros."""
    params = list(params)
    live = [p.tensor for p in params if p.trainable]
    g = tape.gradients(loss, wrt=live)
    return {p.name: (g[p.tensor] if p.trainable else np.zeros_like(p.data)) for p in params}
