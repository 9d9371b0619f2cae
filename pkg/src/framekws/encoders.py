"""Query encoder, document encoder, frame scoring and parameter files."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import formats
from .formats import FingerprintMismatch, FormatError
from .nn import (
    BatchNormState,
    Tape,
    Tensor,
    affine,
    batchnorm,
    dropout,
    embedding_lookup,
    lengths_to_mask,
    masked_time_sum,
    recurrent_forward,
    sigmoid,
    temporal_downsample,
)

BN_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. Defaults are the full-size configuration."""

    n_symbols: int
    feature_dim: int = 42
    embed_dim: int = 32
    query_layers: int = 2
    query_hidden: int = 256
    doc_layers: int = 6
    doc_hidden: int = 512
    # factor applied after each document layer
    downsample: tuple[int, ...] = (2, 1, 1, 2, 1, 1)
    joint_dim: int = 400
    dropout: float = 0.4
    frame_ms: int = 10

    def __post_init__(self):
        object.__setattr__(self, "downsample", tuple(int(s) for s in self.downsample))
        sizes = dict(n_symbols=self.n_symbols, feature_dim=self.feature_dim, embed_dim=self.embed_dim,
                     query_layers=self.query_layers, query_hidden=self.query_hidden,
                     doc_layers=self.doc_layers, doc_hidden=self.doc_hidden, joint_dim=self.joint_dim,
                     frame_ms=self.frame_ms)
        for k, v in sizes.items():
            if int(v) < 1:
                raise ValueError(f"{k} must be positive, got {v}")
        if len(self.downsample) != self.doc_layers:
            raise ValueError(f"downsample has {len(self.downsample)} factors for {self.doc_layers} layers")
        if min(self.downsample) < 1:
            raise ValueError(f"downsample factors must be >= 1, got {self.downsample}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def downsample_product(self) -> int:
        return int(np.prod(self.downsample))

    @property
    def frame_step_ms(self) -> int:
        return self.frame_ms * self.downsample_product

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["downsample"] = list(self.downsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        return formats.sha256_hex(formats.canonical_json(self.to_dict()).encode("utf-8"))

    def output_length(self, n_frames: int) -> int:
        n = n_frames
        for s in self.downsample:
            n //= s
        return n


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes for a configuration."""
    shapes: dict[str, tuple[int, ...]] = {"query.embedding": (config.n_symbols, config.embed_dim)}

    def bn(prefix, n):
        for k in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{prefix}.bn.{k}"] = (n,)

    def rnn(prefix, cell, n_in, hidden):
        gates = 4 if cell == "lstm" else 3
        for d in ("fwd", "bwd"):
            shapes[f"{prefix}.{d}.W_x"] = (gates * hidden, n_in)
            shapes[f"{prefix}.{d}.W_h"] = (gates * hidden, hidden)
            if cell == "lstm":
                shapes[f"{prefix}.{d}.b"] = (gates * hidden,)
            else:
                shapes[f"{prefix}.{d}.b_x"] = (gates * hidden,)
                shapes[f"{prefix}.{d}.b_h"] = (gates * hidden,)

    n_in = config.embed_dim
    for k in range(config.query_layers):
        bn(f"query.gru{k}", n_in)
        rnn(f"query.gru{k}", "gru", n_in, config.query_hidden)
        n_in = 2 * config.query_hidden
    shapes["query.proj.W"] = (config.joint_dim, n_in)
    shapes["query.proj.b"] = (config.joint_dim,)

    n_in = config.feature_dim
    for k in range(config.doc_layers):
        bn(f"doc.lstm{k}", n_in)
        rnn(f"doc.lstm{k}", "lstm", n_in, config.doc_hidden)
        n_in = 2 * config.doc_hidden
    shapes["doc.proj.W"] = (config.joint_dim, n_in)
    shapes["doc.proj.b"] = (config.joint_dim,)
    return shapes


@dataclass
class ParameterStore:
    """Named float32 tensors for both encoders plus the config they belong to."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def trainable_names(self) -> list[str]:
        return sorted(n for n in self.tensors if not n.endswith(BN_SUFFIXES))

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Uniform fan-in weights, zero biases (LSTM forget gate 1), N(0, 0.1) embeddings."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "query.embedding":
            arr = rng.normal(0.0, 0.1, size=shape)
        elif leaf in ("gamma", "running_var"):
            arr = np.ones(shape)
        elif leaf in ("beta", "running_mean", "b_x", "b_h"):
            arr = np.zeros(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
            if ".lstm" in name:
                H = shape[0] // 4
                arr[H:2 * H] = 1.0
        else:
            bound = 1.0 / np.sqrt(shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(np.float32)
    return ParameterStore(config, tensors)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_params(store: ParameterStore, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a parameter file; ``extra`` tensors (e.g. optimizer moments) ride along."""
    tensors = dict(store.tensors)
    meta = {k: v for k, v in store.meta.items() if k != "extra_tensors"}
    if extra:
        tensors.update(extra)
        meta["extra_tensors"] = sorted(extra)
    header = {"config": store.config.to_dict(), "meta": meta}
    data = formats.tensor_file_bytes(store.fingerprint, header, tensors)
    with formats.atomic_write(path) as fh:
        fh.write(data)


def load_params(path, expected_fingerprint: str | None = None, with_extra: bool = False):
    """Read a parameter file written by :func:`save_params`.

    Raises :class:`FormatError` for a corrupt header,
    :class:`FingerprintMismatch` when the stored fingerprint disagrees with
    the stored config or with ``expected_fingerprint``, and
    :class:`~framekws.formats.TruncatedFile` naming the first missing tensor.
    """

    def names(header):
        try:
            cfg = ModelConfig.from_dict(header["config"])
        except Exception:
            return []
        base = list(parameter_shapes(cfg))
        extra = header.get("meta", {}).get("extra_tensors", [])
        return base + list(extra)

    fingerprint, header, tensors = formats.read_tensor_file(path, names)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt header, bad model config ({exc})") from None
    if config.fingerprint() != fingerprint:
        raise FingerprintMismatch(f"{path}: stored fingerprint {fingerprint[:12]}... does not match its config")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: fingerprint {fingerprint[:12]}... != expected {expected_fingerprint[:12]}...")
    shapes = parameter_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise formats.TruncatedFile(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    params = {k: v for k, v in tensors.items() if k in shapes}
    meta = {k: v for k, v in header.get("meta", {}).items() if k != "extra_tensors"}
    store = ParameterStore(config, params, meta)
    if with_extra:
        return store, {k: v for k, v in tensors.items() if k not in shapes}
    return store


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def as_tensors(store: ParameterStore, requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap store arrays (no copy) as tensors; batch-norm statistics are never trainable."""
    return {k: Tensor(v, requires_grad=requires_grad and not k.endswith(BN_SUFFIXES), name=k)
            for k, v in store.tensors.items()}


def _rnn_params(P, prefix):
    return {d: {k.rsplit(".", 1)[-1]: v for k, v in P.items() if k.startswith(f"{prefix}.{d}.")}
            for d in ("fwd", "bwd")}


def _bn(P, prefix, x, mode, mask, tape):
    state = BatchNormState(P[f"{prefix}.bn.running_mean"].data, P[f"{prefix}.bn.running_var"].data)
    return batchnorm(x, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"], state, mode, mask, tape)


def _check_mode(mode, rng, needs_rng):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and needs_rng and rng is None:
        raise ValueError("train mode needs an rng for dropout")


def query_forward(P: dict[str, Tensor], config: ModelConfig, queries: Sequence[Sequence[int]],
                  mode: str = "infer", rng=None, tape: Tape | None = None) -> Tensor:
    """Encode a batch of symbol sequences into ``(Q, D)`` embeddings."""
    _check_mode(mode, rng, False)
    lengths = np.array([len(q) for q in queries], dtype=np.int64)
    for qi, q in enumerate(queries):
        if len(q) == 0:
            raise ValueError(f"query {qi} is empty")
        for pos, s in enumerate(q):
            if not 0 <= s < config.n_symbols:
                raise ValueError(f"query {qi}: symbol {s} at position {pos} outside inventory of {config.n_symbols}")
    K = int(lengths.max())
    ids = np.zeros((K, len(queries)), dtype=np.int64)
    for j, q in enumerate(queries):
        ids[: len(q), j] = q
    mask = lengths_to_mask(lengths, K)
    x = embedding_lookup(P["query.embedding"], ids, tape)
    for k in range(config.query_layers):
        prefix = f"query.gru{k}"
        x = _bn(P, prefix, x, mode, mask, tape)
        x = recurrent_forward("gru", _rnn_params(P, prefix), x, lengths, "bidirectional", tape)
    v = masked_time_sum(x, mask, tape)
    return affine(P["query.proj.W"], P["query.proj.b"], v, axis=-1, tape=tape)


def document_forward(P: dict[str, Tensor], config: ModelConfig, feats: Sequence[np.ndarray],
                     mode: str = "infer", rng=None, tape: Tape | None = None) -> tuple[Tensor, np.ndarray]:
    """Encode a batch of feature matrices into ``(T_out, B, D)`` plus output lengths."""
    _check_mode(mode, rng, config.dropout > 0)
    need = config.downsample_product
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    for i, f in enumerate(feats):
        if f.ndim != 2 or f.shape[1] != config.feature_dim:
            raise ValueError(f"utterance {i}: features of shape {f.shape}, expected (N, {config.feature_dim})")
        if f.shape[0] < need:
            raise ValueError(f"utterance {i}: {f.shape[0]} frames, at least {need} required")
    T = int(lengths.max())
    dtype = P["doc.proj.W"].data.dtype
    x = np.zeros((T, len(feats), config.feature_dim), dtype=dtype)
    for j, f in enumerate(feats):
        x[: f.shape[0], j] = f
    h = Tensor(x)
    for k in range(config.doc_layers):
        prefix = f"doc.lstm{k}"
        mask = lengths_to_mask(lengths, h.shape[0])
        h = _bn(P, prefix, h, mode, mask, tape)
        h = recurrent_forward("lstm", _rnn_params(P, prefix), h, lengths, "bidirectional", tape)
        s = config.downsample[k]
        if s > 1:
            h = temporal_downsample(h, s, tape)
            lengths = lengths // s
        h = dropout(h, config.dropout, mode, rng, tape)
    H = affine(P["doc.proj.W"], P["doc.proj.b"], h, axis=-1, tape=tape)
    return H, lengths


@dataclass
class DocumentEncoding:
    utt_id: str
    H: np.ndarray
    frame_step_ms: int

    @property
    def n_frames(self) -> int:
        return self.H.shape[0]


def encode_query(symbols: Sequence[int], store: ParameterStore) -> np.ndarray:
    """Inference-mode embedding of one query, shape ``(D,)``."""
    P = as_tensors(store)
    return query_forward(P, store.config, [list(symbols)], "infer").data[0]


def encode_queries(queries: Sequence[Sequence[int]], store: ParameterStore) -> np.ndarray:
    P = as_tensors(store)
    return query_forward(P, store.config, [list(q) for q in queries], "infer").data


def encode_document(features: np.ndarray, store: ParameterStore, utt_id: str = "") -> DocumentEncoding:
    """Inference-mode encoding of one utterance."""
    P = as_tensors(store)
    H, lengths = document_forward(P, store.config, [np.asarray(features, dtype=np.float32)], "infer")
    return DocumentEncoding(utt_id, np.ascontiguousarray(H.data[: lengths[0], 0]), store.config.frame_step_ms)


def encode_documents(utterances: dict[str, np.ndarray], store: ParameterStore,
                     batch_frames: int = 20000) -> dict[str, DocumentEncoding]:
    """Encode many utterances, batching similar lengths together.

    Batches are formed deterministically from the sorted ``(length, id)``
    order, so the result depends only on the inputs.
    """
    P = as_tensors(store)
    order = sorted(utterances, key=lambda u: (utterances[u].shape[0], u))
    out: dict[str, DocumentEncoding] = {}
    i = 0
    while i < len(order):
        j = i
        longest = 0
        while j < len(order):
            longest = max(longest, utterances[order[j]].shape[0])
            if (j - i + 1) * longest > batch_frames and j > i:
                break
            j += 1
        batch = order[i:j]
        H, lengths = document_forward(P, store.config, [utterances[u] for u in batch], "infer")
        for col, uid in enumerate(batch):
            out[uid] = DocumentEncoding(uid, np.ascontiguousarray(H.data[: lengths[col], col]),
                                        store.config.frame_step_ms)
        i = j
    return out


def score_frames(H, e: np.ndarray) -> np.ndarray:
    """Per-frame occurrence probabilities ``sigmoid(H e)``."""
    Hm = H.H if isinstance(H, DocumentEncoding) else np.asarray(H)
    e = np.asarray(e)
    if Hm.ndim != 2 or e.ndim != 1 or Hm.shape[1] != e.shape[0]:
        raise ValueError(f"score_frames: H of shape {Hm.shape} incompatible with query of shape {e.shape}")
    return sigmoid(Hm.astype(np.float64) @ e.astype(np.float64))


__all__ = [
    "DocumentEncoding",
    "FingerprintMismatch",
    "FormatError",
    "ModelConfig",
    "ParameterStore",
    "as_tensors",
    "document_forward",
    "encode_document",
    "encode_documents",
    "encode_queries",
    "encode_query",
    "init_params",
    "load_params",
    "parameter_shapes",
    "query_forward",
    "save_params",
    "score_frames",
]
