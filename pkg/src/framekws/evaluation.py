"""Classification trials, hit alignment, TWV / MTWV and KST normalization."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .records import Hypothesis, Reference

SEGMENT_MS = 1000
SEGMENT_HOP_MS = 500


# ---------------------------------------------------------------------------
# segment classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Trial:
    query_id: str
    utt_id: str
    start_ms: int
    end_ms: int
    positive: bool


def segments(duration_ms: int, length_ms: int = SEGMENT_MS, hop_ms: int = SEGMENT_HOP_MS) -> list[tuple[int, int]]:
    """Fixed-length, half-overlapping segments that fit inside the utterance."""
    return [(s, s + length_ms) for s in range(0, int(duration_ms) - length_ms + 1, hop_ms)]


def _overlaps(a0, a1, b0, b1) -> bool:
    return a0 < b1 and b0 < a1


def make_classification_trials(durations: Mapping[str, int], references: Iterable[Reference],
                               query_ids: Sequence[str], rng: np.random.Generator) -> list[Trial]:
    """Balanced trials: every segment touching an occurrence is a positive,
    each paired with one random segment (any utterance) free of the query."""
    by_query: dict[str, list[Reference]] = defaultdict(list)
    for r in references:
        by_query[r.query_id].append(r)
    all_segments = [(u, s, e) for u in sorted(durations) for s, e in segments(durations[u])]
    trials: list[Trial] = []
    for q in query_ids:
        occ = by_query.get(q, [])
        if not occ:
            continue
        occ_by_utt: dict[str, list[Reference]] = defaultdict(list)
        for r in occ:
            occ_by_utt[r.utt_id].append(r)
        pos, neg = [], []
        for u, s, e in all_segments:
            if any(_overlaps(s, e, r.start_ms, r.end_ms) for r in occ_by_utt.get(u, ())):
                pos.append((u, s, e))
            else:
                neg.append((u, s, e))
        if not pos or not neg:
            continue
        picks = rng.choice(len(neg), size=len(pos), replace=len(pos) > len(neg))
        trials += [Trial(q, u, s, e, True) for u, s, e in pos]
        trials += [Trial(q, *neg[int(i)], False) for i in picks]
    return trials


def segment_frames(start_ms: float, end_ms: float, frame_step_ms: float, n_frames: int) -> slice:
    f1 = int(math.floor(start_ms / frame_step_ms))
    f2 = int(math.ceil(end_ms / frame_step_ms))
    return slice(max(0, f1), min(n_frames, max(f2, f1 + 1)))


def accuracy_auc(labels: Sequence[bool], scores: Sequence[float], threshold: float) -> tuple[float, float]:
    """Accuracy of ``score > threshold`` and the rank-statistic AUC (ties count half)."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.size == 0:
        raise ValueError("accuracy_auc: empty trial set")
    if y.shape != s.shape:
        raise ValueError("accuracy_auc: one score per trial required")
    acc = float(np.mean((s > threshold) == y))
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return acc, float("nan")
    ranks = rankdata(s)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return acc, float(auc)


def best_accuracy_threshold(labels: Sequence[bool], scores: Sequence[float]) -> float:
    """Threshold maximizing accuracy over midpoints of distinct scores."""
    s = np.unique(np.asarray(scores, dtype=np.float64))
    cands = np.concatenate(([s[0] - 1e-9], (s[:-1] + s[1:]) / 2, [s[-1]]))
    accs = [accuracy_auc(labels, scores, t)[0] for t in cands]
    return float(cands[int(np.argmax(accs))])


# ---------------------------------------------------------------------------
# alignment and TWV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwvConfig:
    beta: float = 999.9
    threshold: float = 0.5
    tolerance_ms: float = 500.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")


@dataclass(frozen=True)
class LabeledHit:
    hyp: Hypothesis
    correct: bool


@dataclass
class Alignment:
    hits: list[LabeledHit]
    n_true: dict[str, int]
    misses: dict[str, int]


def count_true(references: Iterable[Reference]) -> dict[str, int]:
    n: dict[str, int] = defaultdict(int)
    for r in references:
        n[r.query_id] += 1
    return dict(n)


def align_hits(hypotheses: Iterable[Hypothesis], references: Iterable[Reference],
               tolerance_ms: float = 500.0) -> Alignment:
    """Greedy one-to-one matching in descending score order.

    A hypothesis is correct when its midpoint lies within ``tolerance_ms`` of
    an unmatched reference span of the same query and utterance; the closest
    such reference (by midpoint distance) is consumed.
    """
    refs = list(references)
    pool: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, r in enumerate(refs):
        pool[(r.query_id, r.utt_id)].append(i)
    used = [False] * len(refs)
    order = sorted(hypotheses, key=lambda h: (-h.score, h.query_id, h.utt_id, h.start_ms, h.end_ms))
    hits = []
    for h in order:
        mid = h.midpoint_ms
        best, best_d = None, math.inf
        for i in pool.get((h.query_id, h.utt_id), ()):
            r = refs[i]
            if used[i] or not (r.start_ms - tolerance_ms <= mid <= r.end_ms + tolerance_ms):
                continue
            d = abs(mid - 0.5 * (r.start_ms + r.end_ms))
            if d < best_d:
                best, best_d = i, d
        if best is not None:
            used[best] = True
        hits.append(LabeledHit(h, best is not None))
    n_true = count_true(refs)
    correct: dict[str, int] = defaultdict(int)
    for lh in hits:
        if lh.correct:
            correct[lh.hyp.query_id] += 1
    misses = {q: n - correct.get(q, 0) for q, n in n_true.items()}
    return Alignment(hits, n_true, misses)


@dataclass
class QueryTwv:
    n_true: int
    n_correct: int
    n_fa: int
    p_miss: float
    p_fa: float


@dataclass
class TwvReport:
    twv: float
    threshold: float
    per_query: dict[str, QueryTwv] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    @property
    def p_miss(self) -> float:
        return float(np.mean([v.p_miss for v in self.per_query.values()])) if self.per_query else 1.0

    @property
    def p_fa(self) -> float:
        return float(np.mean([v.p_fa for v in self.per_query.values()])) if self.per_query else 0.0


def n_trials(duration_s: float, n_true: int) -> int:
    """Non-target trials at one per second of audio."""
    return int(math.floor(duration_s)) - n_true


def twv(alignment: Alignment, duration_s: float, beta: float, threshold: float,
        query_ids: Iterable[str] | None = None) -> TwvReport:
    """Term-weighted value at ``threshold`` (hits scoring below it are dropped).

    Queries without true occurrences are excluded from the average and listed
    in ``excluded``.
    """
    queries = set(alignment.n_true) | {lh.hyp.query_id for lh in alignment.hits}
    if query_ids is not None:
        queries |= set(query_ids)
    n_correct: dict[str, int] = defaultdict(int)
    n_fa: dict[str, int] = defaultdict(int)
    for lh in alignment.hits:
        if lh.hyp.score >= threshold:
            if lh.correct:
                n_correct[lh.hyp.query_id] += 1
            else:
                n_fa[lh.hyp.query_id] += 1
    report = TwvReport(0.0, threshold)
    costs = []
    for q in sorted(queries):
        nt = alignment.n_true.get(q, 0)
        if nt == 0:
            report.excluded.append(q)
            continue
        pm = 1.0 - n_correct[q] / nt
        pf = n_fa[q] / n_trials(duration_s, nt)
        report.per_query[q] = QueryTwv(nt, n_correct[q], n_fa[q], pm, pf)
        costs.append(pm + beta * pf)
    report.twv = 1.0 - math.fsum(costs) / len(costs) if costs else 0.0
    return report


def _sweep_arrays(alignment: Alignment, duration_s: float, beta: float):
    per_q_correct: dict[str, list[float]] = defaultdict(list)
    per_q_fa: dict[str, list[float]] = defaultdict(list)
    for lh in alignment.hits:
        (per_q_correct if lh.correct else per_q_fa)[lh.hyp.query_id].append(lh.hyp.score)
    scores = np.array(sorted({lh.hyp.score for lh in alignment.hits}), dtype=np.float64)
    extra = [0.0, 1.0]
    if scores.size:
        extra.append(float(np.nextafter(scores[-1], np.inf)))
    cands = np.unique(np.concatenate((scores, extra)))
    queries = [q for q, n in sorted(alignment.n_true.items()) if n > 0]
    pm = np.zeros_like(cands)
    pf = np.zeros_like(cands)
    for q in queries:
        nt = alignment.n_true[q]
        c = np.sort(per_q_correct.get(q, []))
        f = np.sort(per_q_fa.get(q, []))
        nc = c.size - np.searchsorted(c, cands, side="left")
        nf = f.size - np.searchsorted(f, cands, side="left")
        pm += 1.0 - nc / nt
        pf += nf / n_trials(duration_s, nt)
    k = max(len(queries), 1)
    pm /= k
    pf /= k
    values = 1.0 - (pm + beta * pf) if queries else np.zeros_like(cands)
    return cands, values, pm, pf


def mtwv_sweep(alignment: Alignment, duration_s: float, beta: float) -> tuple[float, float]:
    """Maximum TWV over all thresholds and the lowest threshold achieving it.

    TWV only changes at hypothesis scores, so sweeping the distinct scores
    (plus 0, 1 and just above the top score) is exact.
    """
    cands, values, _, _ = _sweep_arrays(alignment, duration_s, beta)
    i = int(np.argmax(values))
    return float(values[i]), float(cands[i])


def det_points(alignment: Alignment, duration_s: float, beta: float) -> list[tuple[float, float, float]]:
    """``(threshold, mean Pmiss, mean PFA)`` at every sweep threshold."""
    cands, _, pm, pf = _sweep_arrays(alignment, duration_s, beta)
    return [(float(t), float(a), float(b)) for t, a, b in zip(cands, pm, pf)]


# ---------------------------------------------------------------------------
# keyword-specific thresholding
# ---------------------------------------------------------------------------

def kst_threshold(n_est: float, duration_s: float, beta: float) -> float:
    return beta * n_est / (duration_s + (beta - 1.0) * n_est)


def kst_normalize(hypotheses: Sequence[Hypothesis], duration_s: float, beta: float = 999.9) -> list[Hypothesis]:
    """Per-query odds remap putting each query's expected-TWV threshold at 0.5.

    The number of true hits is estimated by the sum of the query's scores;
    the mapping is strictly increasing, so rankings within a query hold.
    """
    sums: dict[str, float] = defaultdict(float)
    for h in hypotheses:
        if not 0.0 < h.score < 1.0:
            raise ValueError(f"KST needs scores in (0, 1), got {h.score} for {h.query_id}/{h.utt_id}")
        sums[h.query_id] += h.score
    thr = {q: min(max(kst_threshold(n, duration_s, beta), 1e-12), 1 - 1e-12) for q, n in sums.items()}
    out = []
    for h in hypotheses:
        t = thr[h.query_id]
        a = h.score * (1.0 - t)
        out.append(h.with_score(a / (a + (1.0 - h.score) * t)))
    return out
