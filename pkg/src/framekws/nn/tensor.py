"""Tensors and the reverse-mode tape."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class Tensor:
    """A numpy array plus an optional gradient slot.

    Kernels read ``data`` and, when recorded on a :class:`Tape`, accumulate
    into ``grad`` during the backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
                + (f" ({self.name})" if self.name else "")
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"


class Tape:
    """Ordered record of executed kernels.

    Each entry holds a closure that reads the kernel output's gradient and
    pushes gradients into the kernel inputs. A tape has a single writer.
    """

    def __init__(self, check_finite: bool = True):
        self.records: list[tuple[str, Callable[[], None]]] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.records)

    def push(self, kernel: str, backward_fn: Callable[[], None]) -> None:
        self.records.append((kernel, backward_fn))

    def output(self, kernel: str, data: np.ndarray, inputs: Iterable[Tensor]) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{kernel} produced non-finite values")
        return Tensor(data, requires_grad=any(t.requires_grad for t in inputs))


def make_output(kernel: str, data: np.ndarray, inputs: Iterable[Tensor], tape: Tape | None) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape.output(kernel, data, inputs)


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Run the reverse sweep from a scalar ``loss``.

    Returns ``{name: dloss/dparam}`` for ``params``; parameters the loss does
    not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss {float(loss.data.reshape(-1)[0])}")
    loss.grad = np.ones_like(loss.data)
    for _, fn in reversed(tape.records):
        fn()
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out
