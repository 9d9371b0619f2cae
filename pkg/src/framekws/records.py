"""Plain records shared by search, evaluation and the file formats."""

from __future__ import annotations

from dataclasses import dataclass

SEPARATOR = "<sp>"


@dataclass(frozen=True, order=True)
class Hypothesis:
    """One putative occurrence of a query; times in milliseconds."""

    query_id: str
    utt_id: str
    start_ms: float
    end_ms: float
    score: float

    def __post_init__(self):
        if not self.start_ms < self.end_ms:
            raise ValueError(f"hypothesis start {self.start_ms} must precede end {self.end_ms}")

    @property
    def midpoint_ms(self) -> float:
        return 0.5 * (self.start_ms + self.end_ms)

    def with_score(self, score: float) -> "Hypothesis":
        return Hypothesis(self.query_id, self.utt_id, self.start_ms, self.end_ms, float(score))


@dataclass(frozen=True, order=True)
class Reference:
    """A true occurrence of a query."""

    query_id: str
    utt_id: str
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class WordSpan:
    word: str
    start_ms: int
    end_ms: int


class Inventory:
    """Symbol inventory. Index 0 is the word separator, written as a space in query text."""

    def __init__(self, symbols: list[str]):
        if not symbols or symbols[0] != SEPARATOR:
            raise ValueError(f"inventory must start with the separator symbol {SEPARATOR!r}")
        if len(set(symbols)) != len(symbols):
            raise ValueError("inventory symbols must be unique")
        self.symbols = list(symbols)
        self._index = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        """Map query text to symbol indices; a space maps to the separator."""
        if not text.strip():
            raise ValueError("empty query")
        out = []
        for pos, ch in enumerate(text.strip()):
            key = SEPARATOR if ch == " " else ch
            if key not in self._index:
                raise ValueError(f"unknown symbol {ch!r} at position {pos} of {text!r}")
            out.append(self._index[key])
        return out

    def letter_count(self, text: str) -> int:
        return sum(1 for ch in text.strip() if ch != " ")
