"""Reconstruction and ranking metrics."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .text import WORD, canonical, tokenize


@dataclass
class MetricsReport:
    bleu: float
    token_f1: float
    exact_match: float
    cosine: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _check(seq: Sequence[str], name: str):
    if len(seq) == 0:
        raise ValueError(f"{name} sequence is empty")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(reference: Sequence[str], hypothesis: Sequence[str], max_order: int = 4) -> float:
    """Sentence BLEU on a 0-100 scale.

    Uniform weights over n-gram orders 1..min(4, len(ref), len(hyp)); orders
    n >= 2 with no matches fall back to 1 / (count + 1). A hypothesis without
    any unigram match scores 0.
    """
    ref, hyp = list(reference), list(hypothesis)
    _check(ref, "reference")
    _check(hyp, "hypothesis")
    order = min(max_order, len(ref), len(hyp))
    log_p = 0.0
    for n in range(1, order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = sum(h.values())
        if matches == 0:
            if n == 1:
                return 0.0
            log_p += math.log(1.0 / (total + 1))
        else:
            log_p += math.log(matches / total)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return 100.0 * bp * math.exp(log_p / order)


def token_f1(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    _check(reference, "reference")
    _check(hypothesis, "hypothesis")
    ref, hyp = set(reference), set(hypothesis)
    common = len(ref & hyp)
    if common == 0:
        return 0.0
    p, r = common / len(hyp), common / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def exact_match_rate(pairs: Iterable[tuple[str, str]], mode: str = WORD) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one pair")
    hits = sum(canonical(a, mode) == canonical(b, mode) for a, b in pairs)
    return 100.0 * hits / len(pairs)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def ndcg_at_k(ranked_ids: Sequence, relevant: Mapping, k: int = 10) -> float:
    """nDCG@k with gain / log2(rank + 1), ranks starting at 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gains = {d: g for d, g in relevant.items() if g > 0}
    if any(g < 0 for g in relevant.values()) or not gains:
        raise ValueError("undefined nDCG: no relevant items")
    dcg = sum(gains.get(d, 0.0) / math.log2(rank + 2) for rank, d in enumerate(ranked_ids[:k]))
    ideal = sorted(gains.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(rank + 2) for rank, g in enumerate(ideal))
    return dcg / idcg


def corpus_report(targets: Sequence[str], outputs: Sequence[str], cosines: Sequence[float],
                  mode: str = WORD) -> MetricsReport:
    """Macro averages of the per-pair scores."""
    if len(targets) != len(outputs) or len(targets) != len(cosines):
        raise ValueError("targets, outputs and cosines differ in length")
    refs = [tokenize(t, mode).tokens for t in targets]
    hyps = [tokenize(o, mode).tokens for o in outputs]
    n = len(refs)
    return MetricsReport(
        bleu=sum(bleu(r, h) for r, h in zip(refs, hyps)) / n,
        token_f1=sum(token_f1(r, h) for r, h in zip(refs, hyps)) / n,
        exact_match=exact_match_rate(zip(targets, outputs), mode),
        cosine=float(np.mean(cosines)),
        n_samples=n,
    )
