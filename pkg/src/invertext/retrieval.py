"""Exact dense retrieval over (possibly defended) document embeddings."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Corpus
from .defense import DefenseConfig, apply_defense
from .metrics import ndcg_at_k
from .text import detokenize, tokenize


@dataclass(frozen=True)
class RetrievalIndex:
    doc_ids: list[str]
    doc_embeddings: np.ndarray
    defense: DefenseConfig

    def __post_init__(self):
        if self.doc_embeddings.shape[0] != len(self.doc_ids):
            raise ValueError("row count differs from id count")
        if not np.all(np.isfinite(self.doc_embeddings)):
            raise ValueError("index contains non-finite rows")
        norms = np.linalg.norm(self.doc_embeddings, axis=1, keepdims=True)
        object.__setattr__(self, "_unit", self.doc_embeddings / np.where(norms == 0, 1.0, norms))
        # position of each doc in ascending-id order, used for tie-breaking
        object.__setattr__(self, "_id_rank", np.argsort(np.argsort(np.array(self.doc_ids, dtype=object))))

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_index(corpus: Corpus, encoder, defense: DefenseConfig | None = None,
                rng: np.random.Generator | None = None) -> RetrievalIndex:
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    defense = defense or DefenseConfig()
    if rng is None:
        rng = np.random.default_rng(defense.seed)
    rows = []
    for doc_id, text in corpus.entries:
        try:
            rows.append(apply_defense(defense, encoder.encode(text), rng))
        except Exception as exc:
            raise type(exc)(f"doc {doc_id!r}: {exc}") from exc
    return RetrievalIndex(list(corpus.ids), np.vstack(rows), defense)


def search_top_k(index: RetrievalIndex, query_e, k: int = 10) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_e, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero query vector")
    scores = index._unit @ (q / norm)
    # scores equal up to rounding noise count as ties and fall back to id order
    order = np.lexsort((index._id_rank, -np.round(scores, 12)))[:k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def per_query_ndcg(index: RetrievalIndex, queries: Sequence[tuple[str, str]], qrels: dict,
                   encoder, k: int = 10) -> list[tuple[str, float]]:
    """``(query_id, nDCG@k)`` per query; queries are encoded without any defense."""
    if not queries:
        raise ValueError("no queries")
    out = []
    for qid, text in queries:
        if qid not in qrels:
            raise KeyError(f"query {qid!r} has no qrels")
        ranked = [d for d, _ in search_top_k(index, encoder.encode(text), k)]
        try:
            out.append((qid, ndcg_at_k(ranked, qrels[qid], k)))
        except ValueError as exc:
            raise ValueError(f"query {qid!r}: {exc}") from exc
    return out


def evaluate_ndcg(index: RetrievalIndex, queries: Sequence[tuple[str, str]], qrels: dict,
                  encoder, k: int = 10) -> float:
    return float(np.mean([v for _, v in per_query_ndcg(index, queries, qrels, encoder, k)]))


def make_dropout_queries(corpus: Corpus, seed: int, n: int | None = None):
    """One query per (sampled) document: the document with one token removed.

    Returns ``(queries, qrels)`` with the source document as sole relevant item.
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(len(corpus))
    if n is not None and n < len(corpus):
        idx = np.sort(rng.choice(len(corpus), size=n, replace=False))
    queries, qrels = [], {}
    for i in idx:
        doc_id, text = corpus.entries[i]
        seq = tokenize(text, corpus.token_mode)
        tokens = list(seq.tokens)
        if len(tokens) > 1:
            del tokens[int(rng.integers(len(tokens)))]
        qid = f"q-{doc_id}"
        queries.append((qid, detokenize(type(seq)(tuple(tokens), seq.mode))))
        qrels[qid] = {doc_id: 1}
    return queries, qrels


def load_qrels_tsv(path) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0] in ("query-id", "query_id"):
                continue
            qid, did, rel = row[0], row[1], int(row[2])
            qrels.setdefault(qid, {})[did] = rel
    return qrels


def write_qrels_tsv(qrels: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["query-id", "corpus-id", "score"])
        for qid, rels in qrels.items():
            for did, rel in rels.items():
                w.writerow([qid, did, rel])
    return path
