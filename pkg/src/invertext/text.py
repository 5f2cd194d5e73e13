"""Texts, token sequences and vocabularies shared by every other module."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

WORD = "word"
CHAR = "char"
MODES = (WORD, CHAR)

_SPLIT = re.compile(r"[\W_]+")


class TokenizationError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    mode: str = WORD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown token mode {self.mode!r}")
        if not self.tokens:
            raise TokenizationError("no tokens")
        if any(not t for t in self.tokens):
            raise TokenizationError("empty token in sequence")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def tokenize(text: str, mode: str = WORD) -> TokenSequence:
    """Split ``text`` into tokens.

    Word mode lowercases and splits on maximal runs of non-alphanumeric
    characters. Char mode keeps case and yields one token per code point.
    """
    if not text or not text.strip():
        raise TokenizationError("no tokens")
    if mode == WORD:
        tokens = tuple(t for t in _SPLIT.split(text.lower()) if t)
    elif mode == CHAR:
        tokens = tuple(text)
    else:
        raise ValueError(f"unknown token mode {mode!r}")
    if not tokens:
        raise TokenizationError("no tokens")
    return TokenSequence(tokens, mode)


def detokenize(seq: TokenSequence) -> str:
    sep = " " if seq.mode == WORD else ""
    return sep.join(seq.tokens)


def truncate_tokens(seq: TokenSequence, n: int) -> TokenSequence:
    if n < 1:
        raise ValueError("n must be >= 1")
    return TokenSequence(seq.tokens[:n], seq.mode)


def canonical(text: str, mode: str = WORD) -> str:
    """Round-trip through the tokenizer; used before any text comparison."""
    return detokenize(tokenize(text, mode))


PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Token <-> id bijection with four reserved ids (pad, bos, eos, unk)."""

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(SPECIALS)
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            if tok in self.id_of:
                continue
            self.id_of[tok] = len(self.tokens)
            self.tokens.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str], mode: str = WORD, min_freq: int = 1) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text, mode).tokens)
        # sorted so the id assignment does not depend on corpus order
        return cls(sorted(t for t, c in counts.items() if c >= min_freq))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of and token not in SPECIALS

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def content_tokens(self) -> list[str]:
        return self.tokens[len(SPECIALS):]

    def hash(self) -> str:
        blob = json.dumps(self.tokens, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"
