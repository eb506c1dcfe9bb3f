"""Closed vocabulary of the synthetic world and the token-sequence type."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white")
SHAPES = ("circle", "square", "triangle", "star", "heart", "cross")
SIZES = ("small", "medium", "large")
SPATIAL = ("left", "right", "top", "bottom", "middle")
GLUE = ("the", "object")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.pad = self.index[PAD]
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]

    @classmethod
    def default(cls) -> "Vocab":
        return cls((PAD, BOS, EOS) + COLORS + SHAPES + SIZES + SPATIAL + GLUE)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def text(self, ids: Iterable[int]) -> str:
        """Readable form without special tokens."""
        specials = (self.pad, self.bos, self.eos)
        return " ".join(self.tokens[i] for i in ids if i not in specials)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(list(self.tokens))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))


@dataclass(frozen=True)
class TokenSeq:
    """Token indices of one expression, normally ending with ``<eos>``."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def terminated(self, vocab: Vocab) -> bool:
        return bool(self.tokens) and self.tokens[-1] == vocab.eos

    def validate(self, vocab: Vocab, t_max: int | None = None) -> None:
        n = len(vocab)
        for i, t in enumerate(self.tokens):
            if not 0 <= t < n:
                raise ValueError(f"token {t} outside vocabulary of size {n}")
            if t == vocab.pad:
                raise ValueError("<pad> inside an expression")
            if t == vocab.eos and i != len(self.tokens) - 1:
                raise ValueError("<eos> before the end of an expression")
        if t_max is not None and len(self.tokens) > t_max:
            raise ValueError(f"expression longer than {t_max}")
