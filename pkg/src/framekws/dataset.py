"""On-disk corpus layout shared by every command.

::

    <root>/inventory.txt          one symbol per line, separator first
    <root>/lexicon.tsv            word, spelling
    <root>/queries_iv.tsv         query_id, text
    <root>/queries_oov.tsv
    <root>/manifest.tsv           split, utterance count, total seconds
    <root>/<split>/feats/<utt>.kwsf
    <root>/<split>/alignments.tsv utt_id, word, start_ms, end_ms
    <root>/<split>/text.tsv       utt_id, transcript
    <root>/<split>/durations.tsv  utt_id, duration_ms
    <root>/<split>/references.tsv query_id, utt_id, start_ms, end_ms
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import formats
from .records import Inventory, Reference
from .synth import SPLITS, SynthCorpus, find_references, split_queries
from .training import Utterance


def write_corpus(corpus: SynthCorpus, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    formats.write_lines(root / "inventory.txt", corpus.inventory.symbols)
    formats.write_pairs(root / "lexicon.tsv", ((w, w) for w in corpus.vocabulary))
    with formats.atomic_write(root / "synth_config.json", "w") as fh:
        fh.write(json.dumps(corpus.config.to_dict(), indent=2, sort_keys=True) + "\n")
    iv, oov = split_queries(corpus, np.random.default_rng(corpus.config.seed))
    formats.write_pairs(root / "queries_iv.tsv", iv)
    formats.write_pairs(root / "queries_oov.tsv", oov)
    manifest = []
    for split in SPLITS:
        utts = corpus.splits[split]
        d = root / split
        for u in utts:
            formats.write_features(d / "feats" / f"{u.utt_id}.kwsf", u.features)
        formats.write_alignments(d / "alignments.tsv", {u.utt_id: u.words for u in utts})
        formats.write_pairs(d / "text.tsv", ((u.utt_id, " ".join(w.word for w in u.words)) for u in utts))
        formats.write_pairs(d / "durations.tsv", ((u.utt_id, u.duration_ms) for u in utts))
        refs = [r for q, t in iv + oov for r in find_references(utts, q, t)]
        formats.write_references(d / "references.tsv", sorted(refs))
        manifest.append((split, len(utts), formats.fmt_score(corpus.total_seconds(split))))
    formats.write_rows(root / "manifest.tsv", manifest)


def load_inventory(root) -> Inventory:
    return Inventory(formats.read_lines(Path(root) / "inventory.txt"))


def load_queries(path) -> list[tuple[str, str]]:
    return formats.read_pairs(path)


def load_all_queries(root) -> list[tuple[str, str]]:
    root = Path(root)
    return load_queries(root / "queries_iv.tsv") + load_queries(root / "queries_oov.tsv")


def load_durations(root, split: str) -> dict[str, int]:
    return {u: int(d) for u, d in formats.read_pairs(Path(root) / split / "durations.tsv")}


def load_features(root, split: str) -> dict[str, np.ndarray]:
    d = Path(root) / split / "feats"
    return {p.stem: formats.read_features(p) for p in sorted(d.glob("*.kwsf"))}


def load_split(root, split: str, frame_ms: int = 10) -> list[Utterance]:
    """Utterances with features and alignments; header sizes are checked
    against the duration manifest."""
    root = Path(root)
    feats = load_features(root, split)
    aligns = formats.read_alignments(root / split / "alignments.tsv")
    durs = load_durations(root, split)
    out = []
    for uid in sorted(durs):
        if uid not in feats:
            raise formats.FormatError(f"{root / split}: no features for {uid}")
        if feats[uid].shape[0] * frame_ms != durs[uid]:
            raise formats.FormatError(
                f"{uid}: {feats[uid].shape[0]} frames disagree with duration {durs[uid]} ms")
        out.append(Utterance(uid, feats[uid], aligns.get(uid, []), frame_ms))
    return out


def load_references(root, split: str) -> list[Reference]:
    return formats.read_references(Path(root) / split / "references.tsv")


def total_seconds(root, split: str) -> float:
    for fields in formats.read_rows(Path(root) / "manifest.tsv", 3, "manifest entry"):
        _, (name, _, secs) = fields
        if name == split:
            return float(secs)
    raise KeyError(f"split {split!r} not in manifest")
