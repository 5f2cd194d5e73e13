"""Teacher-forced training of the base and corrector models, and checkpoint I/O."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import encode_batch
from .inversion import BaseModel, CorrectorModel, TokenDecode, _tensor, encode_ids, generate_base_batch
from .models import InverterNet
from .text import WORD, TokenSequence, Vocabulary, detokenize, tokenize

log = logging.getLogger(__name__)

MIN_TRAINING_TEXTS = 256
CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    gradient_clip_norm: float = 1.0
    seed: int = 0
    validation_fraction: float = 0.1
    keep_best: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.gradient_clip_norm <= 0:
            raise ValueError("training parameters must be positive")
        if not 0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown training keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    pseudo_tokens: int = 16
    max_len: int = 16
    layers: int = 2
    heads: int = 4
    ff: int = 256

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown model keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainingReport:
    initial_val_loss: float
    final_train_loss: float
    final_val_loss: float
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class CorrectionExample:
    target_e: np.ndarray
    hypothesis_text: str
    hypothesis_e: np.ndarray
    target_text: str


def _target_rows(vocab: Vocabulary, mode: str, texts: Sequence[str], max_len: int):
    """Decoder inputs ``[bos] + ids`` and labels ``ids + [eos]``, padded with 0."""
    n = len(texts)
    tgt_in = torch.zeros(n, max_len + 1, dtype=torch.long)
    labels = torch.zeros(n, max_len + 1, dtype=torch.long)
    for i, text in enumerate(texts):
        ids = encode_ids(vocab, mode, text, max_len)
        tgt_in[i, : len(ids) + 1] = torch.tensor([vocab.bos_id] + ids)
        labels[i, : len(ids) + 1] = torch.tensor(ids + [vocab.eos_id])
    return tgt_in, labels


def _loss(net: InverterNet, batch) -> torch.Tensor:
    src, tgt_in, labels = batch[:-2], batch[-2], batch[-1]
    memory, pad = net.encode(*src)
    logits = net.decode_logits(memory, pad, tgt_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=0)


def _eval_loss(net, tensors, idx, batch_size) -> float:
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(idx), batch_size):
            b = idx[s:s + batch_size]
            batch = [t[b] for t in tensors]
            tokens = int((batch[-1] != 0).sum())
            total += float(_loss(net, batch)) * tokens
            count += tokens
    return total / max(count, 1)


def _fit(net: InverterNet, tensors: list[torch.Tensor], cfg: TrainingConfig, log_path=None) -> TrainingReport:
    n = tensors[0].shape[0]
    order = np.random.default_rng(cfg.seed).permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val_idx, train_idx = torch.from_numpy(order[:n_val]), order[n_val:]
    batch_rng = np.random.default_rng([cfg.seed, 1])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    initial = _eval_loss(net, tensors, val_idx, cfg.batch_size)
    report = TrainingReport(initial, float("nan"), initial)
    best_loss, best_state = initial, copy.deepcopy(net.state_dict())
    log_fh = Path(log_path).open("a") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            net.train()
            perm = torch.from_numpy(train_idx[batch_rng.permutation(len(train_idx))])
            running, batches = 0.0, 0
            for bi, s in enumerate(range(0, len(perm), cfg.batch_size)):
                b = perm[s:s + cfg.batch_size]
                loss = _loss(net, [t[b] for t in tensors])
                if not torch.isfinite(loss):
                    raise TrainingDivergence(f"divergence: non-finite loss at epoch {epoch}, batch {bi}")
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.gradient_clip_norm)
                opt.step()
                running += loss.item()
                batches += 1
            train_loss = running / max(batches, 1)
            val_loss = _eval_loss(net, tensors, val_idx, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDivergence(f"divergence: non-finite validation loss at epoch {epoch}")
            wall = time.perf_counter() - t0
            report.final_train_loss, report.final_val_loss = train_loss, val_loss
            if val_loss < best_loss:
                best_loss, best_state = val_loss, copy.deepcopy(net.state_dict())
            for split_name, value in (("train", train_loss), ("validation", val_loss)):
                row = {"epoch": epoch, "split": split_name, "loss": value, "wall_time": wall}
                report.history.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
            log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_loss, val_loss, wall)
    finally:
        if log_fh:
            log_fh.close()
    if cfg.keep_best:
        net.load_state_dict(best_state)
        report.final_val_loss = best_loss
    net.eval()
    return report


def _new_net(vocab: Vocabulary, dim: int, mcfg: ModelConfig, n_projectors: int, seed: int) -> InverterNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return InverterNet(len(vocab), dim, mcfg.width, mcfg.pseudo_tokens, mcfg.max_len, n_projectors,
                           mcfg.layers, mcfg.heads, mcfg.ff)


def train_base(texts: Sequence[str], encoder, cfg: TrainingConfig = TrainingConfig(),
               mcfg: ModelConfig = ModelConfig(), vocab: Vocabulary | None = None,
               token_mode: str = WORD, log_path=None, min_texts: int = MIN_TRAINING_TEXTS):
    """Train the zero-step model: text from its own target embedding.

    Returns ``(BaseModel, TrainingReport)``.
    """
    texts = list(texts)
    if len(texts) < min_texts:
        raise ValueError(f"need at least {min_texts} training texts, got {len(texts)}")
    vocab = vocab or Vocabulary.build(texts, token_mode)
    embeddings = np.stack(encode_batch(encoder, texts))
    tgt_in, labels = _target_rows(vocab, token_mode, texts, mcfg.max_len)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = _new_net(vocab, encoder.dim, mcfg, 1, cfg.seed)
        report = _fit(net, [_tensor(embeddings), tgt_in, labels], cfg, log_path)
    meta = {"role": "base", "seed": cfg.seed, "training": asdict(cfg)}
    return BaseModel(net, vocab, token_mode, meta), report


def perturb_text(text: str, vocab: Vocabulary, mode: str, rng: np.random.Generator,
                 max_edits: int = 4, max_len: int = 16) -> str:
    """Apply 1..max_edits random token substitutions, insertions or deletions."""
    tokens = list(tokenize(text, mode).tokens[:max_len])
    pool = vocab.content_tokens
    for _ in range(int(rng.integers(1, max_edits + 1))):
        op = rng.random()
        pos = int(rng.integers(len(tokens)))
        if op < 0.6 or (op < 0.8 and len(tokens) >= max_len):
            tokens[pos] = pool[rng.integers(len(pool))]
        elif op < 0.8:
            tokens.insert(pos, pool[rng.integers(len(pool))])
        elif len(tokens) > 1:
            del tokens[pos]
    return detokenize(TokenSequence(tuple(tokens), mode))


def augment_texts(texts: Sequence[str], vocab: Vocabulary, mode: str, copies: int, max_edits: int,
                  seed: int, max_len: int = 16, keep_originals: bool = True) -> list[str]:
    """``copies`` randomly edited variants of every text, optionally after the originals."""
    rng = np.random.default_rng([seed, 11])
    out = list(texts) if keep_originals else []
    for text in texts:
        out.extend(perturb_text(text, vocab, mode, rng, max_edits, max_len) for _ in range(copies))
    return out


def make_correction_dataset(base: BaseModel, encoder, texts: Sequence[str], seed: int = 0,
                            decode: TokenDecode | str = "nucleus(0.9)", samples_per_text: int = 1,
                            edits_per_text: int = 0, max_edits: int = 4, batch_size: int = 256):
    """Pair each text with hypotheses and their black-box embeddings.

    Hypotheses are ``samples_per_text`` draws from the base model, plus
    ``edits_per_text`` randomly edited copies of the target (see
    ``perturb_text``). Returns ``(examples, skipped)``; a sample is skipped
    when encoding its hypothesis fails.
    """
    texts = list(texts)
    embeddings = np.stack(encode_batch(encoder, texts))
    examples: list[CorrectionExample] = []
    skipped = 0

    def add(i, hyp):
        nonlocal skipped
        try:
            hyp_e = encoder.encode(hyp)
        except Exception as exc:
            log.warning("skipping sample %d: %s", i, exc)
            skipped += 1
            return
        examples.append(CorrectionExample(embeddings[i], hyp, hyp_e, texts[i]))

    for rep in range(samples_per_text):
        for s in range(0, len(texts), batch_size):
            hyps = generate_base_batch(base, embeddings[s:s + batch_size], decode, seed=(seed, rep, s))
            for j, hyp in enumerate(hyps):
                add(s + j, hyp)
    if edits_per_text:
        rng = np.random.default_rng([seed, 7])
        for i, text in enumerate(texts):
            for _ in range(edits_per_text):
                add(i, perturb_text(text, base.vocab, base.token_mode, rng, max_edits, base.max_len))
    return examples, skipped


def train_corrector(examples: Sequence[CorrectionExample], vocab: Vocabulary, dim: int,
                    cfg: TrainingConfig = TrainingConfig(), mcfg: ModelConfig = ModelConfig(),
                    token_mode: str = WORD, log_path=None, min_examples: int = MIN_TRAINING_TEXTS):
    """Train the corrector on (target, hypothesis) -> target text. Returns ``(CorrectorModel, TrainingReport)``."""
    if len(examples) < min_examples:
        raise ValueError(f"need at least {min_examples} correction examples, got {len(examples)}")
    hyp_rows = [encode_ids(vocab, token_mode, ex.hypothesis_text, mcfg.max_len) for ex in examples]
    hyp_ids = torch.zeros(len(examples), mcfg.max_len, dtype=torch.long)
    for i, ids in enumerate(hyp_rows):
        hyp_ids[i, : len(ids)] = torch.tensor(ids)
    tgt_in, labels = _target_rows(vocab, token_mode, [ex.target_text for ex in examples], mcfg.max_len)
    tensors = [
        _tensor(np.stack([ex.target_e for ex in examples])),
        _tensor(np.stack([ex.hypothesis_e for ex in examples])),
        hyp_ids,
        tgt_in,
        labels,
    ]
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = _new_net(vocab, dim, mcfg, 3, cfg.seed)
        report = _fit(net, tensors, cfg, log_path)
    meta = {"role": "corrector", "seed": cfg.seed, "training": asdict(cfg)}
    return CorrectorModel(net, vocab, token_mode, meta), report


# -- checkpoints ------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


def save_checkpoint(model: BaseModel | CorrectorModel, path) -> Path:
    """Write ``params.bin`` (raw little-endian float32) and ``manifest.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    net = model.net
    state = net.state_dict()
    shapes = [[name, list(t.shape)] for name, t in state.items()]
    blob = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values())
    (path / "params.bin").write_bytes(blob)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "role": "base" if net.n_projectors == 1 else "corrector",
        "dim": net.dim,
        "vocab_size": net.vocab_size,
        "pseudo_tokens": net.pseudo_tokens,
        "width": net.width,
        "max_len": net.max_len,
        "layers": len(net.encoder.layers),
        "heads": net.encoder.layers[0].self_attn.num_heads,
        "ff": net.encoder.layers[0].linear1.out_features,
        "token_mode": model.token_mode,
        "vocab": model.vocab.content_tokens,
        "vocab_hash": model.vocab.hash(),
        "shapes": shapes,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": model.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, ensure_ascii=False))
    return path


def load_checkpoint(path, vocab: Vocabulary | None = None) -> BaseModel | CorrectorModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except (OSError, ValueError) as exc:
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {manifest.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: parameter hash mismatch")
    ck_vocab = Vocabulary(manifest["vocab"])
    if ck_vocab.hash() != manifest["vocab_hash"]:
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: vocabulary hash mismatch")
    if vocab is not None and vocab.hash() != manifest["vocab_hash"]:
        raise VocabularyMismatch("checkpoint was trained with a different vocabulary")
    n_proj = 1 if manifest["role"] == "base" else 3
    net = InverterNet(manifest["vocab_size"], manifest["dim"], manifest["width"], manifest["pseudo_tokens"],
                      manifest["max_len"],
                      n_proj, manifest["layers"], manifest["heads"], manifest["ff"])
    state = net.state_dict()
    expected = [[k, list(v.shape)] for k, v in state.items()]
    if expected != manifest["shapes"]:
        raise ShapeMismatch("parameter shape table does not match the model layout")
    arr = np.frombuffer(blob, dtype="<f4")
    if arr.size != sum(int(np.prod(s)) for _, s in expected):
        raise ShapeMismatch("parameter blob size does not match the shape table")
    offset = 0
    loaded = {}
    for name, shape in expected:
        size = int(np.prod(shape))
        loaded[name] = torch.from_numpy(arr[offset:offset + size].copy()).reshape(shape)
        offset += size
    net.load_state_dict(loaded)
    net.eval()
    cls = BaseModel if n_proj == 1 else CorrectorModel
    return cls(net, ck_vocab, manifest["token_mode"], manifest.get("meta", {}))


@dataclass(frozen=True)
class AugmentConfig:
    """Edited-text targets added on top of the training corpus.

    Every extra target is encoded through the black box like any other text,
    so the attack still only needs query access.
    """
    base_copies: int = 10
    corrector_copies: int = 8
    target_max_edits: int = 3
    hypothesis_max_edits: int = 4
    edit_hypotheses: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.base_copies, self.corrector_copies, self.edit_hypotheses) < 0:
            raise ValueError("copy counts must be >= 0")
        if min(self.target_max_edits, self.hypothesis_max_edits) < 1:
            raise ValueError("max edits must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown augmentation keys: {sorted(extra)}")
        return cls(**d)


def train_attack(texts: Sequence[str], encoder, vocab: Vocabulary | None = None, token_mode: str = WORD,
                 base_cfg: TrainingConfig = TrainingConfig(), corrector_cfg: TrainingConfig = TrainingConfig(),
                 mcfg: ModelConfig = ModelConfig(), aug: AugmentConfig = AugmentConfig(), log_dir=None):
    """Train a base model and then a corrector on its hypotheses.

    Returns ``(base, corrector, {"base": report, "corrector": report})``.
    """
    texts = list(texts)
    vocab = vocab or Vocabulary.build(texts, token_mode)
    log_dir = Path(log_dir) if log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)
    base_texts = augment_texts(texts, vocab, token_mode, aug.base_copies, aug.target_max_edits,
                               aug.seed, mcfg.max_len)
    base, base_report = train_base(base_texts, encoder, base_cfg, mcfg, vocab, token_mode,
                                   log_dir / "base.jsonl" if log_dir else None)
    targets = augment_texts(texts, vocab, token_mode, aug.corrector_copies, aug.target_max_edits,
                            aug.seed + 1, mcfg.max_len, keep_originals=aug.corrector_copies == 0)
    examples, skipped = make_correction_dataset(base, encoder, targets, seed=aug.seed,
                                                edits_per_text=aug.edit_hypotheses,
                                                max_edits=aug.hypothesis_max_edits)
    if skipped:
        log.warning("correction dataset: %d hypotheses skipped", skipped)
    corrector, corr_report = train_corrector(examples, vocab, encoder.dim, corrector_cfg, mcfg, token_mode,
                                             log_dir / "corrector.jsonl" if log_dir else None)
    base.meta["augmentation"] = corrector.meta["augmentation"] = asdict(aug)
    return base, corrector, {"base": base_report, "corrector": corr_report}
