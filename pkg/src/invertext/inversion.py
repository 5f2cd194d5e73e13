"""Base hypothesis generation and the iterative correction loop with a sequence-level beam."""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .metrics import cosine_sim
from .models import InverterNet, beam_decode, greedy_decode, nucleus_decode
from .text import WORD, TokenizationError, Vocabulary, detokenize, tokenize, TokenSequence

log = logging.getLogger(__name__)


@dataclass
class BaseModel:
    net: InverterNet
    vocab: Vocabulary
    token_mode: str = WORD
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_projectors != 1:
            raise ValueError("a base model takes the target projection only")

    @property
    def max_len(self) -> int:
        return self.net.max_len


@dataclass
class CorrectorModel:
    net: InverterNet
    vocab: Vocabulary
    token_mode: str = WORD
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_projectors != 3:
            raise ValueError("a corrector needs target, hypothesis and difference projectors")

    @property
    def max_len(self) -> int:
        return self.net.max_len


@dataclass(frozen=True)
class TokenDecode:
    kind: str = "greedy"
    p: float = 0.9
    k: int = 4

    def __post_init__(self):
        if self.kind not in ("greedy", "nucleus", "token_beam"):
            raise ValueError(f"unknown token decode {self.kind!r}")
        if not 0 < self.p <= 1:
            raise ValueError("nucleus p must be in (0, 1]")
        if self.k < 1:
            raise ValueError("token beam k must be >= 1")

    @classmethod
    def parse(cls, spec: str) -> "TokenDecode":
        """Accepts ``greedy``, ``nucleus(0.9)`` or ``token_beam(4)``."""
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([0-9.]+)\s*\))?\s*", spec)
        if not m:
            raise ValueError(f"bad token decode {spec!r}")
        kind, arg = m.groups()
        if kind == "nucleus":
            return cls(kind, p=float(arg) if arg else 0.9)
        if kind == "token_beam":
            return cls(kind, k=int(arg) if arg else 4)
        if arg:
            raise ValueError(f"greedy takes no argument: {spec!r}")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "nucleus":
            return f"nucleus({self.p:g})"
        if self.kind == "token_beam":
            return f"token_beam({self.k})"
        return "greedy"

    @property
    def candidates_per_hypothesis(self) -> int:
        # corrections never sample: nucleus falls back to greedy there
        return self.k if self.kind == "token_beam" else 1


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 20
    beam_width: int = 4
    token_decode: TokenDecode = TokenDecode("token_beam", k=4)
    max_len: int = 16
    early_exit_cosine: float = 1 - 1e-9
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.token_decode, str):
            object.__setattr__(self, "token_decode", TokenDecode.parse(self.token_decode))
        if not 0 <= self.steps <= 1024:
            raise ValueError("steps must be in [0, 1024]")
        if not 1 <= self.beam_width <= 64:
            raise ValueError("beam_width must be in [1, 64]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0 < self.early_exit_cosine <= 1:
            raise ValueError("early_exit_cosine must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "beam_width": self.beam_width,
            "token_decode": str(self.token_decode),
            "max_len": self.max_len,
            "early_exit_cosine": self.early_exit_cosine,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown inversion keys: {sorted(extra)}")
        return cls(**d)

    def budget(self) -> int:
        """Upper bound on encoder calls for one inversion."""
        return 1 + self.steps * self.beam_width * self.token_decode.candidates_per_hypothesis


@dataclass
class CorrectionState:
    target_e: np.ndarray
    current_text: str
    current_e: np.ndarray
    step: int = 0

    def check(self, encoder, atol: float = 0.0) -> None:
        if not np.allclose(encoder.encode(self.current_text), self.current_e, rtol=0, atol=atol):
            raise ValueError("state embedding is stale for its text")


@dataclass(frozen=True)
class BeamHypothesis:
    text: str
    embedding: np.ndarray
    score: float


@dataclass
class InversionResult:
    best_text: str
    best_cosine: float
    steps_run: int
    trace: list[tuple[str, float]]
    wall_time: float
    encoder_calls: int = 0
    warnings: list[str] = field(default_factory=list)


# -- helpers ----------------------------------------------------------------

def _tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def encode_ids(vocab: Vocabulary, mode: str, text: str, max_len: int) -> list[int]:
    return vocab.encode(tokenize(text, mode).tokens[:max_len])


def text_to_ids(model, text: str) -> list[int]:
    return encode_ids(model.vocab, model.token_mode, text, model.max_len)


def ids_to_text(model, ids: Sequence[int]) -> str | None:
    if not ids:
        return None
    return detokenize(TokenSequence(tuple(model.vocab.decode(ids)), model.token_mode))


def _pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    n = max(len(r) for r in rows)
    out = torch.zeros(len(rows), n, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def emb_to_seq(projector, embedding) -> np.ndarray:
    """Apply one EmbToSeq projector to a single embedding -> ``(pseudo_tokens, width)`` array."""
    with torch.no_grad():
        return projector(_tensor(embedding)[None])[0].double().numpy()


def build_corrector_input(model: CorrectorModel, state: CorrectionState) -> np.ndarray:
    """Target, hypothesis and difference projections followed by the hypothesis token embeddings."""
    ids = text_to_ids(model, state.current_text)
    with torch.no_grad():
        x = model.net.raw_input(_tensor(state.target_e)[None], _tensor(state.current_e)[None],
                                torch.tensor([ids], dtype=torch.long))
    return x[0].double().numpy()


def _decode(net, memory, pad, decode: TokenDecode, max_len: int, rng) -> list[list[list[int]]]:
    """Per input row, a list of candidate id sequences (best first)."""
    if decode.kind == "greedy":
        return [[ids] for ids in greedy_decode(net, memory, pad, max_len)]
    if decode.kind == "nucleus":
        return [[ids] for ids in nucleus_decode(net, memory, pad, max_len, decode.p, rng)]
    return [[ids for ids, _ in beams] for beams in beam_decode(net, memory, pad, max_len, decode.k)]


def generate_base_batch(base: BaseModel, embeddings, decode: TokenDecode | str = "greedy", seed=0,
                        max_len: int | None = None) -> list[str | None]:
    if isinstance(decode, str):
        decode = TokenDecode.parse(decode)
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[1] != base.net.dim:
        raise ValueError(f"dimension mismatch: model expects {base.net.dim}, got {embeddings.shape[1]}")
    rng = np.random.default_rng(seed)
    base.net.eval()
    with torch.no_grad():
        memory, pad = base.net.encode(_tensor(embeddings))
    cands = _decode(base.net, memory, pad, decode, max_len or base.max_len, rng)
    return [ids_to_text(base, c[0]) for c in cands]


def generate_base(base: BaseModel, embedding, decode: TokenDecode | str = "greedy", seed: int = 0) -> str:
    return generate_base_batch(base, np.asarray(embedding)[None], decode, seed)[0]


class CountingEncoder:
    """Wraps an encoder and counts ``encode`` calls."""

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim
        self.token_mode = inner.token_mode
        self.calls = 0

    def encode(self, text: str) -> np.ndarray:
        self.calls += 1
        return self.inner.encode(text)


def _rank(pool: Iterable[BeamHypothesis], width: int) -> list[BeamHypothesis]:
    return sorted(pool, key=lambda h: (-h.score, h.text))[:width]


def correction_step(corrector: CorrectorModel, encoder, target_e, beam: list[BeamHypothesis],
                    cfg: InversionConfig, warnings: list[str] | None = None) -> list[BeamHypothesis]:
    """One round of corrections over the whole beam, re-scored through the encoder."""
    if not beam:
        raise ValueError("beam is empty")
    target_e = np.asarray(target_e, dtype=np.float64)
    decode = cfg.token_decode
    if decode.kind == "nucleus":
        decode = TokenDecode("greedy")
    net = corrector.net
    net.eval()
    with torch.no_grad():
        memory, pad = net.encode(
            _tensor(np.repeat(target_e[None], len(beam), axis=0)),
            _tensor(np.stack([h.embedding for h in beam])),
            _pad([text_to_ids(corrector, h.text) for h in beam]),
        )
    proposals = _decode(net, memory, pad, decode, min(cfg.max_len, corrector.max_len), None)
    pool = {h.text: h for h in beam}
    for cands in proposals:
        for ids in cands:
            text = ids_to_text(corrector, ids)
            if text is None or text in pool:
                continue
            try:
                emb = encoder.encode(text)
                score = cosine_sim(emb, target_e)
            except Exception as exc:
                msg = f"step candidate {text!r} dropped: {exc}"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                continue
            pool[text] = BeamHypothesis(text, emb, score)
    return _rank(pool.values(), cfg.beam_width)


def invert(corrector: CorrectorModel | None, base: BaseModel, encoder, target, cfg: InversionConfig,
           initial: Sequence[str] | None = None) -> InversionResult:
    """Recover text whose embedding matches ``target``.

    ``initial`` replaces the base hypothesis with caller-supplied texts; it is
    a hook for tests and for probing the correction loop in isolation.
    """
    start = time.perf_counter()
    counter = CountingEncoder(encoder)
    e = np.asarray(target, dtype=np.float64)
    if e.shape != (encoder.dim,):
        raise ValueError(f"dimension mismatch: encoder dim {encoder.dim}, target {e.shape}")
    warnings: list[str] = []
    if initial is None:
        texts = [generate_base(base, e, cfg.token_decode, cfg.seed)]
    else:
        texts = list(dict.fromkeys(initial))
    beam = []
    for text in texts:
        emb = counter.encode(text)
        beam.append(BeamHypothesis(text, emb, cosine_sim(emb, e)))
    beam = _rank(beam, cfg.beam_width)
    trace = [(beam[0].text, beam[0].score)]
    steps_run = 0
    if cfg.steps and corrector is None:
        raise ValueError("steps > 0 needs a corrector")
    while steps_run < cfg.steps and beam[0].score < cfg.early_exit_cosine:
        beam = correction_step(corrector, counter, e, beam, cfg, warnings)
        steps_run += 1
        trace.append((beam[0].text, beam[0].score))
    return InversionResult(
        best_text=beam[0].text,
        best_cosine=beam[0].score,
        steps_run=steps_run,
        trace=trace,
        wall_time=time.perf_counter() - start,
        encoder_calls=counter.calls,
        warnings=warnings,
    )
