"""A minimal reverse-mode tape over array-valued operations.

Each recorded op stores its output variable, its parent variables and a
closure mapping the output gradient to one gradient per parent. Gradients of
variables used several times (shared Siamese weights) are summed.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Var(shape={shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self):
        self._ops: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __len__(self):
        return len(self._ops)

    def param(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), requires_grad=True)

    def const(self, value) -> Var:
        return Var(value, requires_grad=False)

    def apply(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        """Record an op whose result is ``value``; ``vjp(g)`` returns parent gradients."""
        parents = tuple(parents)
        out = Var(value, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._ops.append((out, parents, vjp))
        return out

    def backward(self, out: Var, seed=1.0) -> None:
        out.grad = np.asarray(seed, dtype=np.float64)
        for node, parents, vjp in reversed(self._ops):
            if node.grad is None:
                continue
            grads = vjp(node.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------- generic ops


def add_bias(tape: Tape, x: Var, b: Var) -> Var:
    value = x.value + b.value[:, None, None, None]
    return tape.apply(value, (x, b), lambda g: (g, g.sum(axis=(1, 2, 3))))


def relu(tape: Tape, x: Var) -> Var:
    mask = x.value > 0.0
    return tape.apply(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def take_channel(tape: Tape, x: Var, c: int) -> Var:
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[c] = g
        return (full,)

    return tape.apply(x.value[c], (x,), vjp)
