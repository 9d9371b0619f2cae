"""Central finite-difference checks for the tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(build_loss: Callable[[Tape | None], Tensor], params: Mapping[str, Tensor],
              eps: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients with central differences for every parameter.

    ``build_loss(tape)`` must recompute the scalar loss from the current
    contents of ``params`` (recording on ``tape`` when it is not None).
    Returns the relative error per parameter name.
    """
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    tape = Tape()
    loss = build_loss(tape)
    analytic = backward(tape, loss, params)

    def f() -> float:
        return float(build_loss(None).data)

    errors = {}
    for name, p in params.items():
        numeric = numerical_grad(f, p.data, eps)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
