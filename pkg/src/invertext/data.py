"""Corpus ingestion, synthetic corpora, password generation and splits."""
from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .text import CHAR, WORD, TokenizationError, tokenize
from .wordlist import WORDS

log = logging.getLogger(__name__)

EASY, MEDIUM, HARD = "Easy", "Medium", "Hard"
STRENGTHS = (EASY, MEDIUM, HARD)


@dataclass
class Corpus:
    entries: list[tuple[str, str]]
    provenance: dict = field(default_factory=dict)
    token_mode: str = WORD
    skipped: int = 0

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("corpus ids are not unique")
        for doc_id, text in self.entries:
            if not text.strip():
                raise ValueError(f"empty text for id {doc_id!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def texts(self) -> list[str]:
        return [t for _, t in self.entries]

    def subset(self, indices: Sequence[int], **provenance) -> "Corpus":
        return Corpus(
            [self.entries[i] for i in indices],
            {**self.provenance, **provenance},
            self.token_mode,
        )


def load_jsonl_corpus(
    path,
    text_field: str = "text",
    limit: int | None = None,
    seed: int = 0,
    id_field: str = "_id",
    token_mode: str = WORD,
) -> Corpus:
    """Read a BEIR-style JSONL corpus, optionally sampling ``limit`` entries.

    Malformed lines and lines without a usable ``text_field`` are skipped and
    counted in ``Corpus.skipped``. Sampled entries keep their file order.
    """
    path = Path(path)
    entries: list[tuple[str, str]] = []
    skipped = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text = obj[text_field]
                if not isinstance(text, str):
                    raise TypeError(text_field)
                tokenize(text, token_mode)
            except (json.JSONDecodeError, KeyError, TypeError, TokenizationError):
                skipped += 1
                continue
            entries.append((str(obj.get(id_field, lineno)), text))
    if skipped:
        log.warning("%s: skipped %d unusable lines", path, skipped)
    if not entries:
        raise ValueError(f"{path}: no usable lines")
    if limit is not None and limit < len(entries):
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(entries), size=limit, replace=False))
        entries = [entries[i] for i in keep]
    prov = {"source": str(path), "text_field": text_field, "limit": limit, "seed": seed}
    return Corpus(entries, prov, token_mode, skipped)


def write_corpus_jsonl(corpus: Corpus, path) -> Path:
    """Write ``{"_id", "text"}`` lines plus a ``.provenance.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for doc_id, text in corpus.entries:
            fh.write(json.dumps({"_id": doc_id, "text": text}, ensure_ascii=False) + "\n")
    sidecar = {**corpus.provenance, "token_mode": corpus.token_mode, "artifact_version": __version__}
    path.with_suffix(".provenance.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


# -- synthetic sentences ----------------------------------------------------

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "kl", "pl", "st", "tr", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "l", "m", "k"]

# share of the vocabulary per slot class; prepositions take the remainder
_CLASS_SHARES = {"det": 0.03, "adj": 0.2, "noun": 0.35, "verb": 0.22, "adv": 0.1}


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        syllables = int(rng.integers(1, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(syllables)
        )
        if len(w) >= 2 and w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _word_classes(rng: np.random.Generator, vocab_size: int) -> dict[str, list[str]]:
    words = _pseudo_words(rng, vocab_size)
    classes: dict[str, list[str]] = {}
    start = 0
    for name, share in _CLASS_SHARES.items():
        k = max(2, int(round(share * vocab_size)))
        classes[name] = words[start:start + k]
        start += k
    classes["prep"] = words[start:]
    return classes


def _sentence(rng: np.random.Generator, classes: dict[str, list[str]], length: int) -> str:
    def pick(cls):
        pool = classes[cls]
        return pool[rng.integers(len(pool))]

    def noun_phrase():
        out = [pick("det")] if rng.random() < 0.6 else []
        out += [pick("adj") for _ in range(int(rng.integers(0, 3)))]
        return out + [pick("noun")]

    tokens = noun_phrase() + [pick("verb")] + noun_phrase()
    while len(tokens) < length:
        r = rng.random()
        if r < 0.45:
            tokens += [pick("prep")] + noun_phrase()
        elif r < 0.7:
            tokens.append(pick("adv"))
        else:
            tokens += [pick("verb")] + noun_phrase()
    return " ".join(tokens[:length])


def generate_synthetic_corpus(
    seed: int,
    size: int,
    vocab_size: int = 200,
    len_min: int = 4,
    len_max: int = 16,
    id_prefix: str = "syn",
) -> Corpus:
    """Templated pseudo-sentences over a seeded pseudo-word vocabulary.

    Lengths are uniform in ``[len_min, len_max]`` word tokens. The vocabulary
    is drawn from the seed as well, so corpora with different seeds use
    (almost entirely) disjoint words.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if vocab_size < 20:
        raise ValueError("vocab_size must be >= 20")
    if not 1 <= len_min <= len_max:
        raise ValueError("need 1 <= len_min <= len_max")
    rng = np.random.default_rng(seed)
    classes = _word_classes(rng, vocab_size)
    width = len(str(size - 1))
    entries = []
    for i in range(size):
        length = int(rng.integers(len_min, len_max + 1))
        entries.append((f"{id_prefix}-{i:0{width}d}", _sentence(rng, classes, length)))
    prov = {
        "generator": "synthetic_sentences",
        "seed": seed,
        "size": size,
        "vocab_size": vocab_size,
        "len_min": len_min,
        "len_max": len_max,
    }
    return Corpus(entries, prov, WORD)


# -- passwords --------------------------------------------------------------

@dataclass(frozen=True)
class PasswordSpec:
    strength: str
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.strength not in STRENGTHS:
            raise ValueError(f"unknown strength {self.strength!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


_EASY_WORDS = [w for w in WORDS if 4 <= len(w) <= 7]
_LOWER_DIGITS = string.ascii_lowercase + string.digits
_ALNUM = string.ascii_letters + string.digits


def _password(rng: np.random.Generator, strength: str) -> str:
    def chars(alphabet, n):
        return "".join(alphabet[i] for i in rng.integers(len(alphabet), size=n))

    if strength == EASY:
        word = _EASY_WORDS[rng.integers(len(_EASY_WORDS))]
        return word + chars(string.digits, int(rng.integers(1, 3)))
    if strength == MEDIUM:
        if rng.random() < 0.5:
            return WORDS[rng.integers(len(WORDS))] + chars(string.digits, 4)
        return chars(_LOWER_DIGITS, int(rng.integers(8, 12)))
    return chars(_ALNUM, int(rng.integers(16, 21)))


def generate_passwords(spec: PasswordSpec) -> Corpus:
    """Synthetic passwords shaped like the three strength classes.

    Easy: a 4-7 letter word plus one or two digits. Medium: a word plus four
    digits, or 8-11 random lowercase letters and digits. Hard: 16-20 random
    letters (both cases) and digits.
    """
    # strength folded into the seed so classes sharing a seed stay independent
    rng = np.random.default_rng([spec.seed, STRENGTHS.index(spec.strength)])
    tag = spec.strength.lower()
    width = len(str(spec.count - 1))
    entries = [(f"pw-{tag}-{i:0{width}d}", _password(rng, spec.strength)) for i in range(spec.count)]
    prov = {"generator": "passwords", "strength": spec.strength, "count": spec.count, "seed": spec.seed}
    return Corpus(entries, prov, CHAR)


def split(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Corpus, Corpus, Corpus]:
    """Seeded shuffle followed by contiguous train/validation/test cuts."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("need three positive fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    cut1 = int(round(n * fractions[0]))
    cut2 = int(round(n * (fractions[0] + fractions[1])))
    parts = (order[:cut1], order[cut1:cut2], order[cut2:])
    if any(len(p) == 0 for p in parts):
        raise ValueError("a split would be empty")
    names = ("train", "validation", "test")
    return tuple(corpus.subset(p.tolist(), split=name, split_seed=seed) for p, name in zip(parts, names))
