"""Turning frame probabilities into decisions: segment scores, hits, rescoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import formats
from .encoders import ParameterStore, encode_documents, encode_query, score_frames
from .formats import FingerprintMismatch
from .records import Hypothesis

AGGREGATORS: dict[str, Callable[[np.ndarray], float]] = {
    "median": lambda v: float(np.median(v)),
    "mean": lambda v: float(np.mean(v)),
    "max": lambda v: float(np.max(v)),
}


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    min_ms_per_letter: float = 20.0
    aggregator: str = "median"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


def classify_segment(z) -> float:
    """Segment score: the highest frame probability."""
    z = np.asarray(z)
    if z.size == 0:
        raise ValueError("classify_segment: empty probability sequence")
    return float(z.max())


def islands(z: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Inclusive ``(first, last)`` frame ranges of maximal runs with ``z >= threshold``."""
    keep = np.concatenate(([False], np.asarray(z) >= threshold, [False]))
    edges = np.flatnonzero(keep[1:] != keep[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def decode_hits(z, config: DecodeConfig, letter_count: int, frame_step_ms: float,
                query_id: str = "", utt_id: str = "") -> list[Hypothesis]:
    """Threshold, take islands, prune short ones, score each by the aggregator."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("decode_hits: empty probability sequence")
    if frame_step_ms <= 0:
        raise ValueError("frame step must be positive")
    min_ms = config.min_ms_per_letter * letter_count
    agg = AGGREGATORS[config.aggregator]
    hits = []
    for a, b in islands(z, config.threshold):
        if (b - a + 1) * frame_step_ms < min_ms:
            continue
        hits.append(Hypothesis(query_id, utt_id, a * frame_step_ms, (b + 1) * frame_step_ms, agg(z[a:b + 1])))
    return hits


def frame_interval(start_ms: float, end_ms: float, frame_step_ms: float) -> tuple[int, int]:
    """Inclusive frame range covering ``[start, end)``, never empty."""
    f1 = int(math.floor(start_ms / frame_step_ms))
    f2 = max(f1, int(math.ceil(end_ms / frame_step_ms)) - 1)
    return f1, f2


def rescore(baseline: Sequence[Hypothesis], probs: Mapping[tuple[str, str], np.ndarray], gamma: float,
            frame_step_ms: float) -> list[Hypothesis]:
    """Fuse baseline scores with the mean network probability over each span.

    New score is ``gamma * old + mean(z[interval])``; order, count and
    locations are preserved. An interval end past the last frame is clipped.
    """
    out = []
    for h in baseline:
        z = probs.get((h.query_id, h.utt_id))
        if z is None:
            raise KeyError(f"no frame probabilities for query {h.query_id!r} in {h.utt_id!r}")
        f1, f2 = frame_interval(h.start_ms, h.end_ms, frame_step_ms)
        if h.start_ms < 0 or f1 >= len(z):
            raise ValueError(
                f"hypothesis {h.query_id}/{h.utt_id} [{h.start_ms}, {h.end_ms}) lies outside "
                f"the {len(z) * frame_step_ms} ms utterance")
        f2 = min(f2, len(z) - 1)
        out.append(h.with_score(gamma * h.score + float(np.mean(z[f1:f2 + 1]))))
    return out


# ---------------------------------------------------------------------------
# document index
# ---------------------------------------------------------------------------

@dataclass
class DocumentIndex:
    """Pre-computed document encodings, tied to one parameter set."""

    fingerprint: str
    param_digest: str
    encodings: dict[str, np.ndarray]
    frame_step_ms: int

    def check(self, store: ParameterStore) -> None:
        if store.fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"index built for config {self.fingerprint[:12]}..., model has {store.fingerprint[:12]}...")
        if store.digest() != self.param_digest:
            raise FingerprintMismatch("index was built from different parameter values")

    def to_bytes(self) -> bytes:
        return formats.index_file_bytes(self.fingerprint, self.param_digest, self.encodings)

    def save(self, path) -> None:
        with formats.atomic_write(path) as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, store: ParameterStore) -> "DocumentIndex":
        fingerprint, digest, records = formats.read_index_file(path)
        index = cls(fingerprint, digest, records, store.config.frame_step_ms)
        index.check(store)
        return index


def build_index(utterances: Mapping[str, np.ndarray], store: ParameterStore, path=None) -> DocumentIndex:
    encs = encode_documents(dict(utterances), store) if utterances else {}
    index = DocumentIndex(store.fingerprint, store.digest(), {u: e.H for u, e in encs.items()},
                          store.config.frame_step_ms)
    if path is not None:
        index.save(path)
    return index


def search_encodings(encodings: Mapping[str, np.ndarray], embedding: np.ndarray, query_id: str,
                     letter_count: int, config: DecodeConfig, frame_step_ms: float) -> list[Hypothesis]:
    hits = []
    for uid in sorted(encodings):
        H = encodings[uid]
        if H.shape[0] == 0:
            continue
        hits += decode_hits(score_frames(H, embedding), config, letter_count, frame_step_ms, query_id, uid)
    return hits


def search_index(index: DocumentIndex, store: ParameterStore, query_id: str, symbols: Sequence[int],
                 letter_count: int, config: DecodeConfig) -> list[Hypothesis]:
    index.check(store)
    e = encode_query(symbols, store)
    return search_encodings(index.encodings, e, query_id, letter_count, config, index.frame_step_ms)


def search_fresh(utterances: Mapping[str, np.ndarray], store: ParameterStore, query_id: str,
                 symbols: Sequence[int], letter_count: int, config: DecodeConfig) -> list[Hypothesis]:
    """Search without an index, encoding each utterance on its own."""
    from .encoders import encode_document

    e = encode_query(symbols, store)
    encs = {u: encode_document(f, store, u).H for u, f in utterances.items()}
    return search_encodings(encs, e, query_id, letter_count, config, store.config.frame_step_ms)


def frame_probabilities(encodings: Mapping[str, np.ndarray], embeddings: Mapping[str, np.ndarray],
                        pairs: Iterable[tuple[str, str]]) -> dict[tuple[str, str], np.ndarray]:
    """``{(query_id, utt_id): z}`` for the requested pairs."""
    return {(q, u): score_frames(encodings[u], embeddings[q]) for q, u in pairs}
