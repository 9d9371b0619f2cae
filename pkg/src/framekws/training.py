"""Phrase sampling, frame labels, the margin loss and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoders import ModelConfig, ParameterStore, as_tensors, document_forward, init_params, query_forward
from .nn import Adam, Tape, backward, lengths_to_mask, margin_loss_logits, pair_logits
from .records import Inventory, WordSpan

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    words: list[WordSpan]
    frame_ms: int = 10

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration_ms(self) -> int:
        return self.n_frames * self.frame_ms


class TrainingCorpus:
    """Utterances with word alignments and a word -> occurrence index."""

    def __init__(self, utterances: Iterable[Utterance]):
        self.utterances: dict[str, Utterance] = {}
        for u in sorted(utterances, key=lambda u: u.utt_id):
            self._validate(u)
            self.utterances[u.utt_id] = u
        self.word_index: dict[str, list[tuple[str, int]]] = {}
        for uid, u in self.utterances.items():
            for pos, w in enumerate(u.words):
                self.word_index.setdefault(w.word, []).append((uid, pos))

    @staticmethod
    def _validate(u: Utterance) -> None:
        prev_end = 0
        for w in u.words:
            if not 0 <= w.start_ms < w.end_ms <= u.duration_ms:
                raise ValueError(f"{u.utt_id}: span {w} outside utterance of {u.duration_ms} ms")
            if w.start_ms < prev_end:
                raise ValueError(f"{u.utt_id}: span {w} overlaps or precedes the previous word")
            prev_end = w.end_ms

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def ids(self) -> list[str]:
        return list(self.utterances)

    def subset(self, ids: Iterable[str]) -> "TrainingCorpus":
        return TrainingCorpus(self.utterances[i] for i in ids)


@dataclass
class Phrase:
    words: tuple[str, ...]
    occurrences: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class LossConfig:
    positive_weight: float = 5.0
    margin: float = 0.7

    def __post_init__(self):
        if not self.positive_weight > 0:
            raise ValueError(f"positive_weight must be > 0, got {self.positive_weight}")
        if not 0.5 < self.margin <= 1.0:
            raise ValueError(f"margin must be in (0.5, 1], got {self.margin}")


@dataclass(frozen=True)
class SamplerConfig:
    batch_phrases: int = 64
    utts_per_phrase: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.batch_phrases < 1 or self.utts_per_phrase < 1:
            raise ValueError("batch_phrases and utts_per_phrase must be >= 1")


@dataclass(frozen=True)
class Schedule:
    lr: float = 2e-4
    halve_after: int = 4
    stop_after: int = 10
    max_epochs: int | None = None
    validation_fraction: float = 0.1
    validation_batches: int = 8
    min_improvement: float = 1e-5


# ---------------------------------------------------------------------------
# phrases and sampling
# ---------------------------------------------------------------------------

def extract_phrases(corpus: TrainingCorpus, max_order: int = 3) -> list[Phrase]:
    """All 1..max_order-grams of adjacent aligned words, with every occurrence."""
    table: dict[tuple[str, ...], Phrase] = {}
    for uid, u in corpus.utterances.items():
        words = u.words
        for i in range(len(words)):
            for n in range(1, max_order + 1):
                if i + n > len(words):
                    break
                key = tuple(w.word for w in words[i:i + n])
                ph = table.setdefault(key, Phrase(key))
                ph.occurrences.append((uid, words[i].start_ms, words[i + n - 1].end_ms))
    return list(table.values())


def sample_batch(phrases: Sequence[Phrase], corpus: TrainingCorpus, config: SamplerConfig,
                 rng: np.random.Generator) -> list[tuple[Phrase, list[str]]]:
    """Draw phrase tokens uniformly, each with one containing utterance and
    ``utts_per_phrase - 1`` utterances drawn uniformly from the corpus."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    counts = np.array([len(p.occurrences) for p in phrases])
    cum = np.cumsum(counts)
    ids = corpus.ids
    tokens = rng.integers(0, cum[-1], size=config.batch_phrases)
    batch = []
    for tok in tokens:
        pi = int(np.searchsorted(cum, tok, side="right"))
        phrase = phrases[pi]
        occ = int(tok - (cum[pi - 1] if pi else 0))
        utts = [phrase.occurrences[occ][0]]
        if config.utts_per_phrase > 1:
            utts += [ids[j] for j in rng.integers(0, len(ids), size=config.utts_per_phrase - 1)]
        batch.append((phrase, utts))
    return batch


def phrase_spans(words: Sequence[str], alignment: Sequence[WordSpan]) -> list[tuple[int, int]]:
    """Spans (ms) where ``words`` occur as adjacent alignment entries."""
    n = len(words)
    spans = []
    for i in range(len(alignment) - n + 1):
        if all(alignment[i + k].word == words[k] for k in range(n)):
            spans.append((alignment[i].start_ms, alignment[i + n - 1].end_ms))
    return spans


def make_labels(phrase, utterance: Utterance, downsample_product: int) -> np.ndarray:
    """Frame labels at the encoder output rate.

    A full-rate frame is positive when it lies inside an occurrence span; a
    downsampled frame is positive when any frame of its window is.
    """
    words = phrase.words if isinstance(phrase, Phrase) else tuple(phrase)
    N = utterance.n_frames
    full = np.zeros(N, dtype=bool)
    fm = utterance.frame_ms
    for s, e in phrase_spans(words, utterance.words):
        full[s // fm: min(N, -(-e // fm))] = True
    s = downsample_product
    n_out = N // s
    return full[: n_out * s].reshape(n_out, s).any(axis=1).astype(np.float32)


def margin_loss(z, y, config: LossConfig) -> float:
    """Margin-masked weighted cross-entropy over one probability sequence."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"length mismatch: {z.shape} vs {y.shape}")
    lam, phi = config.positive_weight, config.margin
    neg = np.where((z > 1.0 - phi) & (y < 1), (1.0 - y) * np.log1p(-np.minimum(z, 1.0)), 0.0)
    pos = np.where((z < phi) & (y > 0), lam * y * np.log(np.maximum(z, 0.0)), 0.0)
    return float(-(neg + pos).sum()) + 0.0  # no negative zero


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.lr!r}"


@dataclass
class TrainResult:
    store: ParameterStore
    log: list[EpochLog]
    optimizer: Adam
    final_store: ParameterStore
    phrase_tokens: int = 0
    steps_per_epoch: int = 0

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


@dataclass
class BatchTensors:
    """A sampled batch, flattened into encoder inputs and per-pair labels."""

    queries: list[list[int]]
    feats: list[np.ndarray]
    utt_idx: np.ndarray
    query_idx: np.ndarray
    pair_utts: list[str]
    pair_texts: list[str]


def assemble(batch, corpus: TrainingCorpus, inventory: Inventory) -> BatchTensors:
    uniq: dict[str, int] = {}
    queries, u_idx, q_idx, pair_utts, texts = [], [], [], [], []
    for qi, (phrase, utts) in enumerate(batch):
        queries.append(inventory.encode(phrase.text))
        for uid in utts:
            if uid not in uniq:
                uniq[uid] = len(uniq)
            u_idx.append(uniq[uid])
            q_idx.append(qi)
            pair_utts.append(uid)
            texts.append(phrase.text)
    feats = [corpus.utterances[u].features for u in uniq]
    return BatchTensors(queries, feats, np.array(u_idx), np.array(q_idx), pair_utts, texts)


def batch_labels(bt: BatchTensors, corpus: TrainingCorpus, config: ModelConfig, T_out: int):
    P = len(bt.pair_utts)
    labels = np.zeros((T_out, P), dtype=np.float32)
    lengths = np.zeros(P, dtype=np.int64)
    for p, (uid, text) in enumerate(zip(bt.pair_utts, bt.pair_texts)):
        y = make_labels(tuple(text.split(" ")), corpus.utterances[uid], config.downsample_product)
        labels[: len(y), p] = y
        lengths[p] = len(y)
    mask = lengths_to_mask(lengths, T_out) if P else np.zeros((T_out, 0), dtype=bool)
    return labels, mask


def batch_loss(P, config: ModelConfig, bt: BatchTensors, corpus: TrainingCorpus, loss_config: LossConfig,
               mode: str, rng, tape: Tape | None):
    E = query_forward(P, config, bt.queries, mode, rng, tape)
    H, _ = document_forward(P, config, bt.feats, mode, rng, tape)
    logits = pair_logits(H, E, bt.utt_idx, bt.query_idx, tape)
    labels, mask = batch_labels(bt, corpus, config, H.shape[0])
    loss = margin_loss_logits(logits, labels, loss_config.positive_weight, loss_config.margin, mask, tape)
    return loss, logits, labels, mask


def split_validation(corpus: TrainingCorpus, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = corpus.ids
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(fraction * len(ids))))
    val = set(rng.choice(len(ids), size=n_val, replace=False).tolist())
    return [u for i, u in enumerate(ids) if i not in val], [u for i, u in enumerate(ids) if i in val]


def train(corpus: TrainingCorpus, inventory: Inventory, model_config: ModelConfig,
          loss_config: LossConfig = LossConfig(), sampler_config: SamplerConfig = SamplerConfig(),
          schedule: Schedule = Schedule(), init_store: ParameterStore | None = None,
          optimizer_state: dict | None = None,
          on_batch: Callable | None = None) -> TrainResult:
    """Optimize both encoders with Adam on re-sampled phrase batches.

    After each epoch the validation loss on a held-out utterance split is
    computed; the learning rate halves every ``halve_after`` epochs without
    a new best and training stops after ``stop_after`` such epochs (or at
    ``max_epochs``). Returns the best-validation parameters.
    """
    if len(corpus) < 2:
        raise ValueError("training needs at least 2 utterances")
    seeds = np.random.SeedSequence(sampler_config.seed).spawn(4)
    split_seed = int(seeds[0].generate_state(1)[0])
    train_ids, val_ids = split_validation(corpus, schedule.validation_fraction, split_seed)
    train_corpus, val_corpus = corpus.subset(train_ids), corpus.subset(val_ids)
    phrases = extract_phrases(train_corpus)
    val_phrases = extract_phrases(val_corpus)
    n_tokens = sum(len(p.occurrences) for p in phrases)
    steps_per_epoch = math.ceil(n_tokens / sampler_config.batch_phrases)

    sample_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    val_rng = np.random.default_rng(seeds[3])
    val_batches = [assemble(sample_batch(val_phrases, val_corpus, sampler_config, val_rng), val_corpus, inventory)
                   for _ in range(schedule.validation_batches)]

    store = init_store.copy() if init_store is not None else init_params(model_config, sampler_config.seed)
    if store.config != model_config:
        raise ValueError("initial parameters were built for a different model config")
    P = as_tensors(store, requires_grad=True)
    trainable = {k: P[k] for k in store.trainable_names()}
    opt = Adam(trainable, lr=float(store.meta.get("lr", schedule.lr)))
    if optimizer_state is not None:
        opt.load_state(optimizer_state, int(store.meta.get("step", 0)))
    start_epoch = int(store.meta.get("epoch", 0))

    log_entries: list[EpochLog] = []
    best_val = math.inf
    best_store = store.copy()
    stagnant = 0
    epoch = start_epoch
    while True:
        if schedule.max_epochs is not None and epoch - start_epoch >= schedule.max_epochs:
            break
        epoch += 1
        t0 = time.time()
        total_loss, total_pairs = 0.0, 0
        for step in range(steps_per_epoch):
            batch = sample_batch(phrases, train_corpus, sampler_config, sample_rng)
            bt = assemble(batch, train_corpus, inventory)
            for p in trainable.values():
                p.zero_grad()
            tape = Tape()
            where = (f"epoch {epoch} step {step}; phrases {bt.pair_texts[::sampler_config.utts_per_phrase]}, "
                     f"utterances {sorted(set(bt.pair_utts))}")
            try:
                loss, logits, labels, mask = batch_loss(P, model_config, bt, train_corpus, loss_config,
                                                        "train", dropout_rng, tape)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise FloatingPointError("loss is not finite")
                if on_batch is not None:
                    on_batch(opt.step_count, logits.data, labels, mask, value)
                grads = backward(tape, loss, trainable)
                opt.step(grads)
            except FloatingPointError as exc:
                msg = f"non-finite loss at {where} ({exc})"
                log.error(msg)
                raise TrainingError(msg) from None
            total_loss += value
            total_pairs += len(bt.pair_utts)
        train_loss = total_loss / max(total_pairs, 1)
        val_loss = validation_loss(P, model_config, val_batches, val_corpus, loss_config)
        entry = EpochLog(epoch, train_loss, val_loss, opt.lr)
        log_entries.append(entry)
        log.info("epoch %d train %.5f val %.5f lr %.2e (%.0fs)", epoch, train_loss, val_loss, opt.lr,
                 time.time() - t0)
        store.meta.update(step=opt.step_count, epoch=epoch, lr=opt.lr)
        if val_loss < best_val - schedule.min_improvement:
            best_val = val_loss
            stagnant = 0
            best_store = store.copy()
            best_store.meta["best_val_loss"] = val_loss
        else:
            stagnant += 1
            if stagnant >= schedule.stop_after:
                break
            if stagnant % schedule.halve_after == 0:
                opt.lr *= 0.5
                store.meta["lr"] = opt.lr
    best_store.meta.update(step=opt.step_count, epoch=epoch, lr=opt.lr)
    return TrainResult(best_store, log_entries, opt, store, n_tokens, steps_per_epoch)


def validation_loss(P, config: ModelConfig, batches: Sequence[BatchTensors], corpus: TrainingCorpus,
                    loss_config: LossConfig) -> float:
    total, pairs = 0.0, 0
    for bt in batches:
        loss, *_ = batch_loss(P, config, bt, corpus, loss_config, "infer", None, None)
        total += float(loss.data)
        pairs += len(bt.pair_utts)
    return total / max(pairs, 1)
