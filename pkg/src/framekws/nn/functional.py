"""Differentiable kernels.

Sequence batches are time-major, ``(T, B, F)``, with a validity mask of
shape ``(T, B)`` wherever sequences have different lengths. Every kernel
takes an optional ``tape``; when given, a backward closure is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tape, Tensor, make_output

BN_EPS = 1e-5


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and keeps the input dtype
    return 0.5 * np.tanh(0.5 * x) + 0.5


def lengths_to_mask(lengths, max_len: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    T = int(lengths.max()) if max_len is None else max_len
    return np.arange(T)[:, None] < lengths[None, :]


# ---------------------------------------------------------------------------
# affine / sums
# ---------------------------------------------------------------------------

def affine(W: Tensor, b: Tensor, X: Tensor, axis: int = 0, tape: Tape | None = None) -> Tensor:
    """``Y = W X + b`` contracting ``X`` along ``axis``.

    ``W`` is ``(out, in)``; ``X.shape[axis] == in``; ``b`` has shape
    ``(out,)`` and is broadcast over all other axes (e.g. time).
    """
    if W.data.ndim != 2:
        raise ValueError(f"affine: W must be 2-D, got shape {W.shape}")
    n_out, n_in = W.shape
    x = X.data
    ax = axis % x.ndim
    if x.shape[ax] != n_in:
        raise ValueError(
            f"affine: W is {n_out}x{n_in} but X has {x.shape[ax]} along axis {ax} (X shape {x.shape})"
        )
    if b.shape != (n_out,):
        raise ValueError(f"affine: b has shape {b.shape}, expected ({n_out},)")
    y = np.moveaxis(np.tensordot(x, W.data, axes=([ax], [1])), -1, ax)
    bshape = [1] * x.ndim
    bshape[ax] = n_out
    y = y + b.data.reshape(bshape)
    out = make_output("affine", y, (W, b, X), tape)
    if tape is not None and out.requires_grad:
        other = tuple(i for i in range(x.ndim) if i != ax)

        def _back():
            g = out.grad
            if g is None:
                return
            gm = np.moveaxis(g, ax, -1)
            xm = np.moveaxis(x, ax, -1)
            if W.requires_grad:
                W.accumulate(gm.reshape(-1, n_out).T @ xm.reshape(-1, n_in))
            if b.requires_grad:
                b.accumulate(g.sum(axis=other) if other else g.copy())
            if X.requires_grad:
                X.accumulate(np.moveaxis(gm @ W.data, -1, ax))

        tape.push("affine", _back)
    return out


def total(X: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = make_output("total", np.asarray(X.data.sum(), dtype=X.dtype), (X,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is not None:
                X.accumulate(np.broadcast_to(out.grad, X.shape).astype(X.dtype))

        tape.push("total", _back)
    return out


def masked_time_sum(X: Tensor, mask: np.ndarray | None = None, tape: Tape | None = None) -> Tensor:
    """Sum ``(T, B, F)`` over valid time steps, giving ``(B, F)``."""
    m = np.ones(X.shape[:2], dtype=X.dtype) if mask is None else mask.astype(X.dtype)
    y = np.einsum("tbf,tb->bf", X.data, m)
    out = make_output("masked_time_sum", y, (X,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is not None:
                X.accumulate(out.grad[None, :, :] * m[:, :, None])

        tape.push("masked_time_sum", _back)
    return out


def pair_logits(H: Tensor, E: Tensor, utt_idx, query_idx, tape: Tape | None = None) -> Tensor:
    """Frame logits for (utterance, query) pairs.

    ``H`` is ``(T, U, D)`` document encodings, ``E`` is ``(Q, D)`` query
    embeddings; pair ``p`` scores ``H[:, utt_idx[p]] @ E[query_idx[p]]``.
    Result is ``(T, P)``.
    """
    ui = np.asarray(utt_idx, dtype=np.int64)
    qi = np.asarray(query_idx, dtype=np.int64)
    if H.shape[-1] != E.shape[-1]:
        raise ValueError(f"pair_logits: document dim {H.shape[-1]} != query dim {E.shape[-1]}")
    Hp = H.data[:, ui, :]
    Ep = E.data[qi, :]
    y = np.einsum("tpd,pd->tp", Hp, Ep)
    out = make_output("pair_logits", y, (H, E), tape)
    if tape is not None and out.requires_grad:

        def _back():
            g = out.grad
            if g is None:
                return
            if H.requires_grad:
                gH = np.zeros_like(H.data)
                np.add.at(gH, (slice(None), ui), g[:, :, None] * Ep[None, :, :])
                H.accumulate(gH)
            if E.requires_grad:
                gE = np.zeros_like(E.data)
                np.add.at(gE, qi, np.einsum("tp,tpd->pd", g, Hp))
                E.accumulate(gE)

        tape.push("pair_logits", _back)
    return out


# ---------------------------------------------------------------------------
# embedding, dropout, downsampling, batch norm
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids, tape: Tape | None = None) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (E,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= n_rows))
    if bad.size:
        pos = tuple(int(v) for v in bad[0])
        raise IndexError(
            f"embedding_lookup: id {int(ids[pos])} at position {pos if len(pos) > 1 else pos[0]} "
            f"out of range for table with {n_rows} rows"
        )
    out = make_output("embedding_lookup", table.data[ids], (table,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is None:
                return
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
            table.accumulate(g)

        tape.push("embedding_lookup", _back)
    return out


def dropout(X: Tensor, p: float, mode: str, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout; identity in ``infer`` mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or p == 0.0:
        return X
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(X.shape) >= p).astype(X.dtype) / X.dtype.type(1.0 - p)
    out = make_output("dropout", X.data * keep, (X,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is not None:
                X.accumulate(out.grad * keep)

        tape.push("dropout", _back)
    return out


def temporal_downsample(X: Tensor, s: int, tape: Tape | None = None) -> Tensor:
    """Keep the last frame of every length-``s`` window along axis 0.

    Output length is ``floor(N / s)``; shorter inputs give an empty result.
    """
    if s < 1:
        raise ValueError(f"downsample factor must be >= 1, got {s}")
    if s == 1:
        return X
    n_out = X.shape[0] // s
    idx = np.arange(n_out) * s + (s - 1)
    out = make_output("temporal_downsample", X.data[idx], (X,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is None:
                return
            g = np.zeros_like(X.data)
            g[idx] = out.grad
            X.accumulate(g)

        tape.push("temporal_downsample", _back)
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, n_features: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(n_features, dtype=dtype), np.ones(n_features, dtype=dtype))


def batchnorm(X: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str,
              mask: np.ndarray | None = None, tape: Tape | None = None) -> Tensor:
    """Normalize the last axis over all other axes.

    ``mask`` (shape ``X.shape[:-1]``) restricts statistics to valid frames;
    masked frames come out as zeros. In ``train`` mode the running
    statistics in ``state`` are updated in place.
    """
    x = X.data
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    m = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ValueError(f"batchnorm mask shape {m.shape} does not match {x.shape[:-1]}")
    mf = m[..., None].astype(x.dtype)
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        y = ((x - state.running_mean) * inv * gamma.data + beta.data) * mf
        out = make_output("batchnorm", y.astype(x.dtype, copy=False), (X, gamma, beta), tape)
        if tape is not None and out.requires_grad:
            xhat = (x - state.running_mean) * inv

            def _back_infer():
                g = out.grad
                if g is None:
                    return
                g = g * mf
                red = tuple(range(x.ndim - 1))
                gamma.accumulate((g * xhat).sum(axis=red).astype(x.dtype))
                beta.accumulate(g.sum(axis=red).astype(x.dtype))
                X.accumulate((g * gamma.data * inv).astype(x.dtype))

            tape.push("batchnorm", _back_infer)
        return out

    n = int(m.sum())
    if n < 2:
        raise ValueError(f"batchnorm train mode needs >= 2 valid frames per feature, got {n}")
    red = tuple(range(x.ndim - 1))
    mean = (x * mf).sum(axis=red) / n
    xc = (x - mean) * mf
    var = (xc * xc).sum(axis=red) / n
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data) * mf
    mom = state.momentum
    state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[:] = (1 - mom) * state.running_var + mom * var * (n / (n - 1))
    out = make_output("batchnorm", y.astype(x.dtype, copy=False), (X, gamma, beta), tape)
    if tape is not None and out.requires_grad:

        def _back_train():
            g = out.grad
            if g is None:
                return
            g = g * mf
            dgamma = (g * xhat).sum(axis=red)
            dbeta = g.sum(axis=red)
            gamma.accumulate(dgamma.astype(x.dtype))
            beta.accumulate(dbeta.astype(x.dtype))
            if X.requires_grad:
                dxhat = g * gamma.data
                dx = inv / n * (n * dxhat - dxhat.sum(axis=red) - xhat * (dxhat * xhat).sum(axis=red))
                X.accumulate((dx * mf).astype(x.dtype))

        tape.push("batchnorm", _back_train)
    return out


# ---------------------------------------------------------------------------
# recurrent layers
# ---------------------------------------------------------------------------

def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-column time index that reverses each valid prefix, leaving pads."""
    t = np.arange(T)[:, None]
    L = lengths[None, :]
    return np.where(t < L, L - 1 - t, t)


def _shifted(a: np.ndarray) -> np.ndarray:
    """``a`` delayed by one step along time, with zeros at t = 0."""
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


# The cell loops below expect columns sorted by decreasing length, so the
# sequences still running at step t are exactly the first active[t] columns.

def _lstm_pass(p, x, active):
    W_x, W_h, b = p["W_x"].data, p["W_h"].data, p["b"].data
    T, B, _ = x.shape
    H = W_h.shape[1]
    WhT = np.ascontiguousarray(W_h.T)
    gx = x @ W_x.T + b
    h = np.zeros((B, H), dtype=x.dtype)
    c = np.zeros((B, H), dtype=x.dtype)
    out = np.zeros((T, B, H), dtype=x.dtype)
    cs = np.zeros((T, B, H), dtype=x.dtype)
    tcs = np.zeros((T, B, H), dtype=x.dtype)
    acts = np.zeros((T, B, 4 * H), dtype=x.dtype)
    for t in range(T):
        n = active[t]
        a = gx[t, :n] + h[:n] @ WhT
        act = acts[t, :n]
        act[:] = sigmoid(a)
        act[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c[:n] = f * c[:n] + i * g
        cs[t, :n] = c[:n]
        tc = tcs[t, :n]
        np.tanh(c[:n], out=tc)
        h[:n] = o * tc
        out[t, :n] = h[:n]
    return out, {"acts": acts, "tc": tcs, "c": cs, "h": out}


def _lstm_backward(p, x, active, cache, dout):
    W_x, W_h = p["W_x"].data, p["W_h"].data
    T, B, _ = x.shape
    H = W_h.shape[1]
    acts, tcs = cache["acts"], cache["tc"]
    c_prev = _shifted(cache["c"])
    dA = np.zeros((T, B, 4 * H), dtype=x.dtype)
    dh = np.zeros((B, H), dtype=x.dtype)
    dc = np.zeros((B, H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        n = active[t]
        act = acts[t, :n]
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        tc = tcs[t, :n]
        dh_new = dh[:n] + dout[t, :n]
        dc_tot = dc[:n] + dh_new * o * (1 - tc * tc)
        da = dA[t, :n]
        da[:, :H] = dc_tot * g * i * (1 - i)
        da[:, H:2 * H] = dc_tot * c_prev[t, :n] * f * (1 - f)
        da[:, 2 * H:3 * H] = dc_tot * i * (1 - g * g)
        da[:, 3 * H:] = dh_new * tc * o * (1 - o)
        dh[:n] = da @ W_h
        dc[:n] = dc_tot * f
    flat = dA.reshape(-1, 4 * H)
    grads = {
        "W_x": flat.T @ x.reshape(-1, x.shape[-1]),
        "W_h": flat.T @ _shifted(cache["h"]).reshape(-1, H),
        "b": flat.sum(axis=0),
    }
    return dA @ W_x, grads


def _gru_pass(p, x, active):
    W_x, W_h, b_x, b_h = p["W_x"].data, p["W_h"].data, p["b_x"].data, p["b_h"].data
    T, B, _ = x.shape
    H = W_h.shape[1]
    WhT = np.ascontiguousarray(W_h.T)
    gx = x @ W_x.T + b_x
    h = np.zeros((B, H), dtype=x.dtype)
    out = np.zeros((T, B, H), dtype=x.dtype)
    rzns = np.zeros((T, B, 3 * H), dtype=x.dtype)
    ghns = np.zeros((T, B, H), dtype=x.dtype)
    for t in range(T):
        n = active[t]
        gh = h[:n] @ WhT + b_h
        rzn = rzns[t, :n]
        rzn[:, :2 * H] = sigmoid(gx[t, :n, :2 * H] + gh[:, :2 * H])
        r, z = rzn[:, :H], rzn[:, H:2 * H]
        rzn[:, 2 * H:] = np.tanh(gx[t, :n, 2 * H:] + r * gh[:, 2 * H:])
        ghns[t, :n] = gh[:, 2 * H:]
        h[:n] = (1 - z) * rzn[:, 2 * H:] + z * h[:n]
        out[t, :n] = h[:n]
    return out, {"rzn": rzns, "ghn": ghns, "h": out}


def _gru_backward(p, x, active, cache, dout):
    W_x, W_h = p["W_x"].data, p["W_h"].data
    T, B, _ = x.shape
    H = W_h.shape[1]
    h_prev_all = _shifted(cache["h"])
    dGx = np.zeros((T, B, 3 * H), dtype=x.dtype)
    dGh = np.zeros((T, B, 3 * H), dtype=x.dtype)
    dh = np.zeros((B, H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        n = active[t]
        rzn = cache["rzn"][t, :n]
        r, z, nn_ = rzn[:, :H], rzn[:, H:2 * H], rzn[:, 2 * H:]
        dh_new = dh[:n] + dout[t, :n]
        dan = dh_new * (1 - z) * (1 - nn_ * nn_)
        dar = dan * cache["ghn"][t, :n] * r * (1 - r)
        daz = dh_new * (h_prev_all[t, :n] - nn_) * z * (1 - z)
        gx_t, gh_t = dGx[t, :n], dGh[t, :n]
        gx_t[:, :H] = dar
        gx_t[:, H:2 * H] = daz
        gx_t[:, 2 * H:] = dan
        gh_t[:, :2 * H] = gx_t[:, :2 * H]
        gh_t[:, 2 * H:] = dan * r
        dh[:n] = gh_t @ W_h + dh_new * z
    fx = dGx.reshape(-1, 3 * H)
    fh = dGh.reshape(-1, 3 * H)
    grads = {
        "W_x": fx.T @ x.reshape(-1, x.shape[-1]),
        "W_h": fh.T @ h_prev_all.reshape(-1, H),
        "b_x": fx.sum(axis=0),
        "b_h": fh.sum(axis=0),
    }
    return dGx @ W_x, grads


_CELLS = {"lstm": (_lstm_pass, _lstm_backward), "gru": (_gru_pass, _gru_backward)}


def recurrent_forward(cell: str, params: Mapping[str, Mapping[str, Tensor]], X: Tensor,
                      lengths=None, direction: str = "bidirectional",
                      tape: Tape | None = None) -> Tensor:
    """Run a GRU or LSTM layer over a time-major batch.

    ``params`` maps ``"fwd"`` and/or ``"bwd"`` to per-direction weights:
    LSTM ``W_x (4H, I), W_h (4H, H), b (4H,)`` with gate order i, f, g, o;
    GRU ``W_x (3H, I), W_h (3H, H), b_x, b_h (3H,)`` with order r, z, n.
    ``X`` is ``(T, B, I)`` or ``(T, I)``. A bidirectional output is
    ``[forward | backward]`` along the last axis. Padded steps output zeros.
    """
    cell = cell.lower()
    if cell not in _CELLS:
        raise ValueError(f"unknown cell {cell!r}")
    if direction not in ("fwd", "bwd", "bidirectional"):
        raise ValueError(f"unknown direction {direction!r}")
    squeeze = X.data.ndim == 2
    x = X.data[:, None, :] if squeeze else X.data
    T, B, I = x.shape
    if T == 0:
        raise ValueError("recurrent_forward: empty sequence")
    dirs = ["fwd", "bwd"] if direction == "bidirectional" else [direction]
    for d in dirs:
        if d not in params:
            raise KeyError(f"recurrent_forward: missing {d!r} parameters")
        w_in = params[d]["W_x"].shape[1]
        if w_in != I:
            raise ValueError(f"recurrent_forward: cell input size {w_in} != frame dimension {I}")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ValueError(f"recurrent_forward: invalid lengths {lengths.tolist()} for T={T}")
    run, run_back = _CELLS[cell]
    order = np.argsort(-lengths, kind="stable")
    sorted_len = lengths[order]
    # active[t] = number of sequences with length > t
    active = [int(v) for v in (sorted_len[None, :] > np.arange(T)[:, None]).sum(axis=1)]
    cols = np.broadcast_to(order[None, :], (T, B))
    rev = _reverse_index(sorted_len, T)
    gather = {"fwd": (np.broadcast_to(np.arange(T)[:, None], (T, B)), cols), "bwd": (rev, cols)}

    outs, caches = [], []
    for d in dirs:
        ti, ci = gather[d]
        o_sorted, c = run(params[d], x[ti, ci], active)
        o = np.empty_like(o_sorted)
        o[ti, ci] = o_sorted
        outs.append(o)
        caches.append(c)
    y = np.concatenate(outs, axis=-1) if len(outs) > 1 else outs[0]
    if squeeze:
        y = y[:, 0, :]
    inputs = [X] + [t for d in dirs for t in params[d].values()]
    out = make_output(f"recurrent_{cell}", y, inputs, tape)
    if tape is not None and out.requires_grad:

        def _back():
            g = out.grad
            if g is None:
                return
            g = g[:, None, :] if squeeze else g
            dx_total = np.zeros_like(x)
            Hd = g.shape[-1] // len(dirs)
            for k, d in enumerate(dirs):
                ti, ci = gather[d]
                gd = g[..., k * Hd:(k + 1) * Hd][ti, ci]
                dx_sorted, grads = run_back(params[d], x[ti, ci], active, caches[k], gd)
                dx = np.empty_like(dx_sorted)
                dx[ti, ci] = dx_sorted
                dx_total += dx
                for name, gw in grads.items():
                    params[d][name].accumulate(gw.astype(x.dtype, copy=False))
            if X.requires_grad:
                X.accumulate(dx_total[:, 0, :] if squeeze else dx_total)

        tape.push(f"recurrent_{cell}", _back)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def margin_loss_logits(logits: Tensor, labels: np.ndarray, weight: float, margin: float,
                       mask: np.ndarray | None = None, tape: Tape | None = None) -> Tensor:
    """Margin-masked weighted cross-entropy summed over frames, from logits.

    Positive frames contribute ``-weight * log z`` only while ``z < margin``;
    negative frames contribute ``-log(1 - z)`` only while ``z > 1 - margin``.
    The indicator masks are constants of the forward pass.
    """
    a = logits.data
    y = np.asarray(labels, dtype=a.dtype)
    if y.shape != a.shape:
        raise ValueError(f"labels shape {y.shape} != logits shape {a.shape}")
    valid = np.ones(a.shape, dtype=a.dtype) if mask is None else np.asarray(mask, dtype=a.dtype)
    z = sigmoid(a)
    pos_on = (z < margin) * y * valid
    neg_on = (z > 1.0 - margin) * (1.0 - y) * valid
    # -log z = softplus(-a); -log(1 - z) = softplus(a)
    sp_neg = np.logaddexp(0.0, -a)
    sp_pos = np.logaddexp(0.0, a)
    loss = np.asarray((weight * pos_on * sp_neg + neg_on * sp_pos).sum(), dtype=a.dtype)
    out = make_output("margin_loss", loss, (logits,), tape)
    if tape is not None and out.requires_grad:

        def _back():
            if out.grad is None:
                return
            g = -weight * pos_on * (1.0 - z) + neg_on * z
            logits.accumulate((g * out.grad).astype(a.dtype))

        tape.push("margin_loss", _back)
    return out
