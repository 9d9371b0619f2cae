"""Deterministic synthetic corpus with speech-like features and word alignments.

Each symbol owns a prototype feature vector. A word is rendered by holding
each of its letters' prototypes for a random number of frames; words are
separated by stretches of the separator (silence) prototype, and Gaussian
noise is added to every frame.
"""

from __future__ import annotations

import string
from dataclasses import asdict, dataclass, field

import numpy as np

from .records import SEPARATOR, Hypothesis, Inventory, Reference, WordSpan
from .training import Utterance, phrase_spans

SPLITS = ("train", "dev", "eval")


@dataclass(frozen=True)
class SynthConfig:
    n_symbols: int = 20
    feature_dim: int = 16
    symbol_frames: tuple[int, int] = (3, 10)
    noise_sigma: float = 0.3
    words_per_utt: tuple[int, int] = (4, 8)
    word_letters: tuple[int, int] = (3, 6)
    vocab_size: int = 50
    oov_words: int = 10
    n_train: int = 2000
    n_dev: int = 200
    n_eval: int = 200
    silence_frames: tuple[int, int] = (5, 15)
    min_word_distance: int = 2
    seed: int = 0
    frame_ms: int = 10

    def __post_init__(self):
        for name in ("symbol_frames", "words_per_utt", "word_letters", "silence_frames"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a nonempty range of positive integers, got {(lo, hi)}")
        if self.feature_dim < 1 or self.n_symbols < 3:
            raise ValueError("feature_dim must be >= 1 and n_symbols >= 3")
        if self.n_symbols - 1 > len(string.ascii_lowercase):
            raise ValueError(f"at most {len(string.ascii_lowercase) + 1} symbols supported")
        if not 0 <= self.oov_words < self.vocab_size:
            raise ValueError("oov_words must be in [0, vocab_size)")
        if self.min_word_distance < 1:
            raise ValueError("min_word_distance must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.n_train, self.n_dev, self.n_eval) < 0:
            raise ValueError("utterance counts must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SynthCorpus:
    config: SynthConfig
    inventory: Inventory
    prototypes: np.ndarray
    iv_words: list[str]
    oov_words: list[str]
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    @property
    def vocabulary(self) -> list[str]:
        return self.iv_words + self.oov_words

    def durations(self, split: str) -> dict[str, int]:
        return {u.utt_id: u.duration_ms for u in self.splits[split]}

    def total_seconds(self, split: str) -> float:
        return sum(u.duration_ms for u in self.splits[split]) / 1000.0


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _distinct(word: str, lexicon, min_distance: int) -> bool:
    return all(edit_distance(word, w) >= min_distance for w in lexicon)


def _random_words(rng, letters, n, lengths, taken, min_distance=1, max_tries=100_000):
    lo, hi = lengths
    capacity = sum(len(letters) ** L for L in range(lo, hi + 1))
    if capacity < 2 * (n + len(taken)):
        raise ValueError(f"symbol inventory too small: {capacity} spellings of length {lo}-{hi} "
                         f"for a vocabulary of {n + len(taken)}")
    out = []
    seen = list(taken)
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could only draw {len(out)} of {n} words at edit distance >= {min_distance}")
        L = int(rng.integers(lo, hi + 1))
        w = "".join(letters[int(i)] for i in rng.integers(0, len(letters), size=L))
        if w not in seen and _distinct(w, seen, min_distance):
            seen.append(w)
            out.append(w)
    return out


def _recombined_words(rng, iv, n, lengths, min_distance=1, max_tries=100_000):
    lo, hi = lengths
    seen = list(iv)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could only compose {len(out)} of {n} out-of-vocabulary words")
        a, b = (iv[int(i)] for i in rng.choice(len(iv), size=2, replace=False))
        w = a[: int(rng.integers(1, len(a)))] + b[int(rng.integers(1, len(b))):]
        if lo <= len(w) <= hi and w not in seen and _distinct(w, seen, min_distance):
            seen.append(w)
            out.append(w)
    return out


def render_utterance(utt_id: str, words: list[str], inventory: Inventory, prototypes: np.ndarray,
                     config: SynthConfig, rng: np.random.Generator) -> Utterance:
    sil = prototypes[0]
    lo, hi = config.symbol_frames
    slo, shi = config.silence_frames
    rows: list[np.ndarray] = []
    spans = []
    n = 0

    def hold(vec, k):
        nonlocal n
        rows.append(np.repeat(vec[None, :], k, axis=0))
        n += k

    hold(sil, int(rng.integers(slo, shi + 1)))
    for w in words:
        start = n
        for sym in inventory.encode(w):
            hold(prototypes[sym], int(rng.integers(lo, hi + 1)))
        spans.append(WordSpan(w, start * config.frame_ms, n * config.frame_ms))
        hold(sil, int(rng.integers(slo, shi + 1)))
    feats = np.concatenate(rows, axis=0)
    if config.noise_sigma > 0:
        feats = feats + rng.normal(0.0, config.noise_sigma, size=feats.shape)
    return Utterance(utt_id, feats.astype(np.float32), spans, config.frame_ms)


def generate(config: SynthConfig) -> SynthCorpus:
    """Build the whole corpus; a pure function of ``config``."""
    root = np.random.SeedSequence(config.seed)
    lex_seq, proto_seq, *split_seqs = root.spawn(2 + len(SPLITS))
    letters = list(string.ascii_lowercase[: config.n_symbols - 1])
    inventory = Inventory([SEPARATOR] + letters)
    lex_rng = np.random.default_rng(lex_seq)
    n_iv = config.vocab_size - config.oov_words
    if n_iv < 2 and config.oov_words:
        raise ValueError("need at least 2 in-vocabulary words to compose out-of-vocabulary ones")
    d = config.min_word_distance
    iv = _random_words(lex_rng, letters, n_iv, config.word_letters, (), d)
    oov = _recombined_words(lex_rng, iv, config.oov_words, config.word_letters, d) if config.oov_words else []
    prototypes = np.random.default_rng(proto_seq).normal(size=(config.n_symbols, config.feature_dim))

    counts = {"train": config.n_train, "dev": config.n_dev, "eval": config.n_eval}
    corpus = SynthCorpus(config, inventory, prototypes, iv, oov)
    wlo, whi = config.words_per_utt
    for split, seq in zip(SPLITS, split_seqs):
        vocab = iv if split == "train" else iv + oov
        utts = []
        for i, useq in enumerate(seq.spawn(counts[split])):
            rng = np.random.default_rng(useq)
            words = [vocab[int(j)] for j in rng.integers(0, len(vocab), size=int(rng.integers(wlo, whi + 1)))]
            utts.append(render_utterance(f"{split}{i:05d}", words, inventory, prototypes, config, rng))
        corpus.splits[split] = utts
    return corpus


def find_references(utterances, query_id: str, text: str) -> list[Reference]:
    words = tuple(text.split(" "))
    return [Reference(query_id, u.utt_id, s, e) for u in utterances for s, e in phrase_spans(words, u.words)]


def split_queries(corpus: SynthCorpus, rng: np.random.Generator, n_iv: int | None = None,
                  n_oov: int | None = None) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """``(iv, oov)`` lists of ``(query_id, text)``.

    IV queries are training words that also occur in the dev and eval sets;
    OOV queries are the composed words absent from training transcripts,
    kept only when they occur in both dev and eval.
    """
    train_words = {w.word for u in corpus.splits["train"] for w in u.words}

    def occurs_everywhere(word):
        return all(find_references(corpus.splits[s], "", word) for s in ("dev", "eval"))

    iv_pool = [w for w in corpus.iv_words if w in train_words and occurs_everywhere(w)]
    oov_pool = [w for w in corpus.oov_words if w not in train_words and occurs_everywhere(w)]
    n_iv = len(iv_pool) if n_iv is None else min(n_iv, len(iv_pool))
    n_oov = len(oov_pool) if n_oov is None else min(n_oov, len(oov_pool))
    iv_pick = sorted(rng.choice(len(iv_pool), size=n_iv, replace=False).tolist()) if n_iv else []
    oov_pick = sorted(rng.choice(len(oov_pool), size=n_oov, replace=False).tolist()) if n_oov else []
    iv = [(f"iv{k:04d}", iv_pool[i]) for k, i in enumerate(iv_pick)]
    oov = [(f"oov{k:04d}", oov_pool[i]) for k, i in enumerate(oov_pick)]
    return iv, oov


def synthetic_baseline(references: list[Reference], durations: dict[str, int], query_ids: list[str],
                       rng: np.random.Generator, keep_prob: float = 0.8, true_score=(0.3, 0.95),
                       fa_per_query: float = 3.0, fa_score=(0.05, 0.6), jitter_ms: float = 60.0,
                       ) -> list[Hypothesis]:
    """A degraded detector's output: some true occurrences with noisy scores
    and shifted boundaries, plus false alarms at random places."""
    hyps = []
    for r in references:
        if rng.random() >= keep_prob:
            continue
        dur = durations[r.utt_id]
        s = float(np.clip(r.start_ms + rng.normal(0, jitter_ms), 0, dur - 10))
        e = float(np.clip(r.end_ms + rng.normal(0, jitter_ms), s + 10, dur))
        hyps.append(Hypothesis(r.query_id, r.utt_id, round(s), round(e), float(rng.uniform(*true_score))))
    uids = sorted(durations)
    for q in query_ids:
        for _ in range(int(rng.poisson(fa_per_query))):
            u = uids[int(rng.integers(len(uids)))]
            dur = durations[u]
            length = float(rng.uniform(200, 600))
            s = float(rng.uniform(0, max(dur - length, 1)))
            hyps.append(Hypothesis(q, u, round(s), round(min(dur, s + length)), float(rng.uniform(*fa_score))))
    return sorted(hyps, key=lambda h: (h.query_id, h.utt_id, h.start_ms))
