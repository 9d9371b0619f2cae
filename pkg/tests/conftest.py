import numpy as np
import pytest

from framekws.nn import Tape, Tensor
from framekws.nn.tensor import make_output


def weighted_sum(X: Tensor, R: np.ndarray, tape: Tape | None) -> Tensor:
    """Scalar ``sum(X * R)`` with a fixed random ``R``; used to probe gradients."""
    out = make_output("weighted_sum", np.asarray((X.data * R).sum()), (X,), tape)
    if tape is not None and out.requires_grad:
        tape.push("weighted_sum", lambda: X.accumulate(R * out.grad))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
