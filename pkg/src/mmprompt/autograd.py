"""Tape-based reverse-mode differentiation.

Ops record onto the innermost active :class:`Tape` only when at least one
input requires a gradient, so anything computed purely from frozen weights
and data costs nothing at backward time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, check_finite

_TAPES: list["Tape"] = []


@dataclass
class Node:
    op: str
    inputs: tuple
    vjp: Callable


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, op: str, inputs: tuple, out: Tensor, vjp: Callable) -> None:
        out.requires_grad = True
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, vjp))


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Parameter(Tensor):
    """A named model weight.  Frozen parameters never receive gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str, trainable: bool = True, dtype=None):
        super().__init__(value, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def assign(self, arr: np.ndarray) -> None:
        """Rebind the value (the previous buffer is left untouched)."""
        arr = np.array(arr, dtype=self.data.dtype, copy=True)
        if arr.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {arr.shape} != {self.data.shape}")
        check_finite(arr, f"assign({self.name})")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def make_result(arr: np.ndarray, op: str, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap an op output, check it, and record it if any input needs a gradient."""
    check_finite(arr, op)
    out = Tensor.wrap(arr)
    tape = current_tape()
    if tape is not None:
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                tape.record(op, inputs, out, vjp)
                break
    return out


def detach(x: Tensor) -> Tensor:
    """Same values, cut off from the tape."""
    return Tensor.wrap(x.data)


class no_record:
    """Context in which no tape is active (evaluation passes)."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()
        return self

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def backward(loss: Tensor, tape: Tape) -> dict:
    """Gradients of a scalar ``loss`` with respect to every leaf that requires one.

    Returns a dict keyed by the leaf tensors (usually trainable Parameters).
    Trainable leaves that were used on the tape but received no signal get
    zeros.  The same mapping is stored on ``tape.gradients``.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss was not produced on this tape")

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for idx in range(loss.node_id, -1, -1):
        node = tape.nodes[idx]
        g = pending.pop(idx, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.tape is tape and t.node_id is not None:
                prev = pending.get(t.node_id)
                pending[t.node_id] = gi if prev is None else prev + gi
            else:
                prev = leaves.get(t)
                leaves[t] = gi if prev is None else prev + gi
    for node in tape.nodes[: loss.node_id + 1]:
        for t in node.inputs:
            if isinstance(t, Parameter) and t.trainable and t not in leaves:
                leaves[t] = np.zeros_like(t.data)
    for t, g in leaves.items():
        if g.shape != t.shape:
            raise AssertionError(f"gradient shape {g.shape} != value shape {t.shape}")
        check_finite(g, "backward")
    tape.gradients = leaves
    return leaves
