"""Torch modules for the base and corrector inverters, plus batched decoding."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# segment ids for the encoder input blocks
SEG_TARGET, SEG_HYPOTHESIS, SEG_DIFFERENCE, SEG_TOKENS = range(4)


class EmbToSeq(nn.Module):
    """Two bias-free linear maps with a gelu between, reshaped to ``(pseudo_tokens, width)``."""

    def __init__(self, dim: int, width: int, pseudo_tokens: int):
        super().__init__()
        self.dim, self.width, self.pseudo_tokens = dim, width, pseudo_tokens
        self.hidden = nn.Linear(dim, width, bias=False)
        self.expand = nn.Linear(width, pseudo_tokens * width, bias=False)
        nn.init.normal_(self.hidden.weight, std=1.0)
        nn.init.normal_(self.expand.weight, std=1.0 / math.sqrt(width))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: projector expects {self.dim}, got {emb.shape[-1]}")
        h = self.expand(F.gelu(self.hidden(emb)))
        return h.reshape(*emb.shape[:-1], self.pseudo_tokens, self.width)


class InverterNet(nn.Module):
    """Small pre-LN transformer encoder-decoder over projected embeddings.

    ``n_projectors`` is 1 for the base model (target only) and 3 for the
    corrector (target, hypothesis, difference).
    """

    def __init__(self, vocab_size: int, dim: int, width: int = 128, pseudo_tokens: int = 8, max_len: int = 16,
                 n_projectors: int = 1, layers: int = 2, heads: int = 4, ff: int = 256,
                 dropout: float = 0.0):
        super().__init__()
        self.vocab_size, self.dim = vocab_size, dim
        self.width, self.pseudo_tokens = width, pseudo_tokens
        self.max_len, self.n_projectors = max_len, n_projectors
        self.projectors = nn.ModuleList(EmbToSeq(dim, width, pseudo_tokens) for _ in range(n_projectors))
        self.token_embed = nn.Embedding(vocab_size, width)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.src_pos = nn.Embedding(n_projectors * pseudo_tokens + max_len, width)
        self.tgt_pos = nn.Embedding(max_len + 1, width)
        self.segment = nn.Embedding(4, width)
        for emb in (self.src_pos, self.tgt_pos, self.segment):
            nn.init.normal_(emb.weight, std=0.02)
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(width, heads, ff, dropout, batch_first=True, norm_first=True),
            layers, enable_nested_tensor=False,
        )
        self.decoder = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(width, heads, ff, dropout, batch_first=True, norm_first=True),
            layers,
        )
        self.out_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, vocab_size)
        nn.init.normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)
        mask = torch.triu(torch.full((max_len + 1, max_len + 1), float("-inf")), diagonal=1)
        self.register_buffer("causal", mask, persistent=False)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def raw_input(self, target_e, hyp_e=None, hyp_ids=None) -> torch.Tensor:
        """Concatenated encoder input blocks, before position/segment embeddings.

        Shapes: embeddings ``(B, d)``, ``hyp_ids`` ``(B, n)`` padded with 0.
        Result is ``(B, pseudo_tokens, width)`` for the base model and
        ``(B, 3 * pseudo_tokens + n, width)`` for the corrector.
        """
        blocks = [self.projectors[0](target_e)]
        if self.n_projectors == 3:
            blocks.append(self.projectors[1](hyp_e))
            blocks.append(self.projectors[2](target_e - hyp_e))
            blocks.append(self.token_embed(hyp_ids))
        return torch.cat(blocks, dim=1)

    def encode(self, target_e, hyp_e=None, hyp_ids=None):
        x = self.raw_input(target_e, hyp_e, hyp_ids)
        B, T, _ = x.shape
        n_proj = self.n_projectors * self.pseudo_tokens
        seg = torch.full((T,), SEG_TOKENS, dtype=torch.long, device=x.device)
        seg[:n_proj] = torch.arange(n_proj, device=x.device) // self.pseudo_tokens
        x = x + self.segment(seg) + self.src_pos(torch.arange(T, device=x.device))
        pad = torch.zeros(B, T, dtype=torch.bool, device=x.device)
        if hyp_ids is not None and self.n_projectors == 3:
            pad[:, n_proj:] = hyp_ids == 0
        return self.encoder(x, src_key_padding_mask=pad), pad

    def decode_logits(self, memory, memory_pad, tgt_in) -> torch.Tensor:
        T = tgt_in.shape[1]
        y = self.token_embed(tgt_in) + self.tgt_pos(torch.arange(T, device=tgt_in.device))
        h = self.decoder(y, memory, tgt_mask=self.causal[:T, :T], tgt_is_causal=True,
                         memory_key_padding_mask=memory_pad)
        return self.out(self.out_norm(h))


# -- decoding ---------------------------------------------------------------
# ids: pad=0, bos=1, eos=2, unk=3 (see text.Vocabulary)
NEVER_EMIT = [0, 1, 3]

def _strip(ids: list[int]) -> list[int]:
    out = []
    for i in ids:
        if i == 2:
            break
        if i > 2:
            out.append(i)
    return out


def _step_logprobs(net, memory, pad, seqs):
    logits = net.decode_logits(memory, pad, seqs)[:, -1]
    logits[:, NEVER_EMIT] = float("-inf")
    if seqs.shape[1] == 1:
        logits[:, 2] = float("-inf")  # at least one token
    return F.log_softmax(logits, dim=-1)


@torch.no_grad()
def greedy_decode(net: InverterNet, memory, pad, max_len: int) -> list[list[int]]:
    B = memory.shape[0]
    seqs = torch.ones(B, 1, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        nxt = _step_logprobs(net, memory, pad, seqs).argmax(-1)
        nxt = torch.where(done, torch.zeros_like(nxt), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done |= nxt == 2
        if bool(done.all()):
            break
    return [_strip(row[1:].tolist()) for row in seqs]


@torch.no_grad()
def nucleus_decode(net: InverterNet, memory, pad, max_len: int, p: float,
                   rng: np.random.Generator) -> list[list[int]]:
    """Sample from the smallest token set whose cumulative probability reaches ``p``."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    B = memory.shape[0]
    seqs = torch.ones(B, 1, dtype=torch.long)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        probs = _step_logprobs(net, memory, pad, seqs).exp().double().numpy()
        nxt = np.zeros(B, dtype=np.int64)
        for b in range(B):
            if done[b]:
                continue
            nxt[b] = nucleus_sample(probs[b], p, rng)
        done |= nxt == 2
        seqs = torch.cat([seqs, torch.from_numpy(nxt)[:, None]], dim=1)
        if done.all():
            break
    return [_strip(row[1:].tolist()) for row in seqs]


def nucleus_sample(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = order[: int(np.searchsorted(cum, p * cum[-1] - 1e-12)) + 1]
    w = probs[keep] / probs[keep].sum()
    return int(keep[rng.choice(len(keep), p=w)])


@torch.no_grad()
def beam_decode(net: InverterNet, memory, pad, max_len: int, k: int) -> list[list[tuple[list[int], float]]]:
    """Token-level beam search; per input, up to ``k`` (ids, log-likelihood) best first.

    Finished beams are carried along with their score frozen.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    B = memory.shape[0]
    V = net.vocab_size
    mem = memory.repeat_interleave(k, dim=0)
    mpad = pad.repeat_interleave(k, dim=0)
    seqs = torch.ones(B * k, 1, dtype=torch.long)
    scores = torch.full((B, k), float("-inf"), dtype=torch.float64)
    scores[:, 0] = 0.0
    done = torch.zeros(B * k, dtype=torch.bool)
    for _ in range(max_len):
        lp = _step_logprobs(net, mem, mpad, seqs).double()
        # a finished beam only extends with pad at no cost
        frozen = torch.full((V,), float("-inf"), dtype=torch.float64)
        frozen[0] = 0.0
        lp = torch.where(done[:, None], frozen[None, :], lp)
        cand = (scores.reshape(B * k, 1) + lp).reshape(B, k * V)
        top, idx = cand.topk(k, dim=1)
        src = idx // V + torch.arange(B)[:, None] * k
        tok = idx % V
        seqs = torch.cat([seqs[src.reshape(-1)], tok.reshape(-1, 1)], dim=1)
        done = done[src.reshape(-1)] | (tok.reshape(-1) == 2)
        scores = top
        if bool(done.all()):
            break
    out = []
    rows = seqs[:, 1:].tolist()
    for b in range(B):
        beams = []
        seen = set()
        for j in range(k):
            s = float(scores[b, j])
            if s == float("-inf"):
                continue
            ids = _strip(rows[b * k + j])
            if tuple(ids) in seen:
                continue
            seen.add(tuple(ids))
            beams.append((ids, s))
        out.append(beams)
    return out
