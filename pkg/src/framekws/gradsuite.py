"""Finite-difference gradient suite over every kernel and the full model.

Used by ``framekws gradcheck`` and by the test suite. Everything runs in
float64 so central differences are accurate to well below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoders import ModelConfig, as_tensors, document_forward, init_params, query_forward
from .nn import (BatchNormState, Tape, Tensor, affine, batchnorm, dropout, embedding_lookup, gradcheck,
                 margin_loss_logits, masked_time_sum, pair_logits, recurrent_forward, temporal_downsample)
from .nn.tensor import make_output

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def weighted_sum(X: Tensor, R: np.ndarray, tape: Tape | None) -> Tensor:
    """Scalar ``sum(X * R)`` with a fixed random ``R``, used to probe gradients."""
    out = make_output("weighted_sum", np.asarray((X.data * R).sum()), (X,), tape)
    if tape is not None and out.requires_grad:
        tape.push("weighted_sum", lambda: X.accumulate(R * out.grad))
    return out


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


def _probe(fn, params, rng):
    """Gradcheck ``sum(fn(tape) * R)`` for a random ``R``."""
    shape = fn(None).shape
    R = rng.normal(size=shape)
    return max(gradcheck(lambda tape: weighted_sum(fn(tape), R, tape), params).values())


def _rnn_params(cell, rng, n_in, hidden):
    k = 4 if cell == "lstm" else 3
    out = {}
    for d in ("fwd", "bwd"):
        p = {"W_x": _t(rng, k * hidden, n_in, scale=0.5), "W_h": _t(rng, k * hidden, hidden, scale=0.5)}
        if cell == "lstm":
            p["b"] = _t(rng, k * hidden, scale=0.1)
        else:
            p["b_x"] = _t(rng, k * hidden, scale=0.1)
            p["b_h"] = _t(rng, k * hidden, scale=0.1)
        out[d] = p
    return out


def kernel_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    checks: dict[str, Callable[[], float]] = {}

    def affine_check():
        W, b, X = _t(rng, 3, 4), _t(rng, 3), _t(rng, 5, 2, 4)
        return _probe(lambda tape: affine(W, b, X, axis=-1, tape=tape), {"W": W, "b": b, "X": X}, rng)

    def recurrent_check(cell):
        def run():
            params = _rnn_params(cell, rng, 3, 4)
            X = _t(rng, 5, 3, 3)
            lengths = np.array([5, 2, 4])
            flat = {f"{d}.{k}": v for d, p in params.items() for k, v in p.items()}
            flat["X"] = X
            return _probe(lambda tape: recurrent_forward(cell, params, X, lengths, tape=tape), flat, rng)
        return run

    def embedding_check():
        table = _t(rng, 6, 3)
        ids = np.array([[0, 5], [2, 2], [5, 1]])
        return _probe(lambda tape: embedding_lookup(table, ids, tape), {"table": table}, rng)

    def batchnorm_check(mode):
        def run():
            X, g, b = _t(rng, 4, 3, 2), _t(rng, 2), _t(rng, 2)
            mask = np.array([[1, 1, 1], [1, 0, 1], [1, 0, 1], [0, 0, 1]], dtype=bool)
            state = BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))

            def fn(tape):
                s = BatchNormState(state.running_mean.copy(), state.running_var.copy())
                return batchnorm(X, g, b, s, mode, mask, tape)
            return _probe(fn, {"X": X, "gamma": g, "beta": b}, rng)
        return run

    def dropout_check():
        X = _t(rng, 6, 2, 3)
        return _probe(lambda tape: dropout(X, 0.3, "train", np.random.default_rng(7), tape), {"X": X}, rng)

    def downsample_check():
        X = _t(rng, 7, 2, 3)
        return _probe(lambda tape: temporal_downsample(X, 3, tape), {"X": X}, rng)

    def time_sum_check():
        X = _t(rng, 4, 3, 2)
        mask = np.array([[1, 1, 1], [1, 0, 1], [0, 0, 1], [0, 0, 1]], dtype=bool)
        return _probe(lambda tape: masked_time_sum(X, mask, tape), {"X": X}, rng)

    def pair_logits_check():
        H, E = _t(rng, 4, 2, 3), _t(rng, 3, 3)
        ui, qi = np.array([0, 1, 1, 0]), np.array([0, 0, 2, 2])
        return _probe(lambda tape: pair_logits(H, E, ui, qi, tape), {"H": H, "E": E}, rng)

    def margin_loss_check():
        # keep logits away from the margin switch points so the indicators
        # cannot flip under the finite-difference step
        a = np.concatenate([rng.uniform(-3.0, -1.0, 10), rng.uniform(1.0, 3.0, 10)])
        rng.shuffle(a)
        logits = Tensor(a.reshape(5, 4))
        y = (rng.random((5, 4)) < 0.5).astype(np.float64)
        errs = gradcheck(lambda tape: margin_loss_logits(logits, y, 5.0, 0.7, tape=tape), {"logits": logits})
        return max(errs.values())

    checks["affine"] = affine_check
    checks["recurrent_lstm"] = recurrent_check("lstm")
    checks["recurrent_gru"] = recurrent_check("gru")
    checks["embedding_lookup"] = embedding_check
    checks["batchnorm_train"] = batchnorm_check("train")
    checks["batchnorm_infer"] = batchnorm_check("infer")
    checks["dropout"] = dropout_check
    checks["temporal_downsample"] = downsample_check
    checks["masked_time_sum"] = time_sum_check
    checks["pair_logits"] = pair_logits_check
    checks["margin_loss"] = margin_loss_check
    return checks


def full_model_check(seed: int = 0) -> float:
    """Both encoders, pair logits and the loss on a 3-frame utterance and a
    2-symbol query, with every trainable tensor checked."""
    config = ModelConfig(n_symbols=5, feature_dim=3, embed_dim=3, query_layers=1, query_hidden=3,
                         doc_layers=2, doc_hidden=3, downsample=(1, 3), joint_dim=4, dropout=0.2)
    store = init_params(config, seed)
    rng = np.random.default_rng(seed)
    for k, v in store.tensors.items():
        store.tensors[k] = v.astype(np.float64)
    P = as_tensors(store, requires_grad=True)
    trainable = {k: P[k] for k in store.trainable_names()}
    feats = [rng.normal(size=(3, 3))]
    queries = [[1, 2]]
    labels = np.ones((1, 1))

    def build(tape):
        E = query_forward(P, config, queries, "train", None, tape)
        H, _ = document_forward(P, config, feats, "train", np.random.default_rng(11), tape)
        logits = pair_logits(H, E, [0], [0], tape)
        # unit weight and margin: the smooth cross-entropy limit
        return margin_loss_logits(logits, labels, 1.0, 1.0, tape=tape)

    return max(gradcheck(build, trainable).values())


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = [CheckResult(name, float(fn())) for name, fn in kernel_checks(seed).items()]
    results.append(CheckResult("full_model", float(full_model_check(seed))))
    return results
