"""Black-box text encoders: a seeded toy encoder and a remote HTTP adapter."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from .text import WORD, Vocabulary, tokenize

log = logging.getLogger(__name__)

ENCODER_FORMAT_VERSION = 1
API_KEY_ENV = "INVERTEXT_API_KEY"


class EncoderError(RuntimeError):
    index: int | None = None


class RetryableEncoderError(EncoderError):
    pass


class HTTPStatusError(EncoderError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"encoder service returned HTTP {status}")
        self.status = status
        self.body = body


class DimensionMismatch(EncoderError):
    pass


class InvalidEmbedding(EncoderError):
    pass


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidEmbedding("invalid embedding: expected a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidEmbedding("invalid embedding: non-finite entries")
    if dim is not None and arr.size != dim:
        raise DimensionMismatch(f"dimension mismatch: expected {dim}, got {arr.size}")
    return arr


class Encoder(Protocol):
    dim: int
    token_mode: str

    def encode(self, text: str) -> np.ndarray: ...


def encode_batch(encoder: Encoder, texts: Sequence[str]) -> list[np.ndarray]:
    out = []
    for i, text in enumerate(texts):
        try:
            out.append(encoder.encode(text))
        except Exception as exc:
            err = exc if isinstance(exc, EncoderError) else EncoderError(str(exc))
            err.index = i
            if err is exc:
                raise
            raise err from exc
    return out


@dataclass(frozen=True)
class EncoderSpec:
    dim: int = 64
    max_tokens: int = 32
    kind: str = "toy"

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("dim must be >= 8")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.kind not in ("toy", "remote"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")


def _orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class ToyEncoder:
    """Mean of position-rotated token vectors, L2-normalized.

    Token vectors and the per-position orthogonal mixers are regenerated from
    ``seed``; nothing but the manifest is ever written to disk.
    """

    kind = "toy"

    def __init__(self, vocab: Vocabulary, dim: int = 64, max_tokens: int = 32, seed: int = 0,
                 token_mode: str = WORD):
        self.spec = EncoderSpec(dim, max_tokens, "toy")
        self.vocab = vocab
        self.dim = dim
        self.max_tokens = max_tokens
        self.seed = seed
        self.token_mode = token_mode
        rng = np.random.default_rng(seed)
        self.token_table = rng.standard_normal((len(vocab), dim)) / np.sqrt(dim)
        self.position_mixers = np.stack([_orthogonal(rng, dim) for _ in range(max_tokens)])
        # rotated[i, v] = mixer_i @ token_v
        self._rotated = np.einsum("pij,vj->pvi", self.position_mixers, self.token_table)
        for arr in (self.token_table, self.position_mixers, self._rotated):
            arr.setflags(write=False)

    def token_ids(self, text: str) -> list[int]:
        tokens = tokenize(text, self.token_mode).tokens[: self.max_tokens]
        return self.vocab.encode(tokens)

    def encode(self, text: str) -> np.ndarray:
        ids = self.token_ids(text)
        pooled = self._rotated[np.arange(len(ids)), ids].mean(axis=0)
        return pooled / np.linalg.norm(pooled)

    def encode_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return encode_batch(self, texts)

    def manifest(self) -> dict:
        return {
            "kind": "toy",
            "format_version": ENCODER_FORMAT_VERSION,
            "dim": self.dim,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "token_mode": self.token_mode,
            "vocab": self.vocab.content_tokens,
            "vocab_hash": self.vocab.hash(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=1, ensure_ascii=False))
        return path

    @classmethod
    def load(cls, path) -> "ToyEncoder":
        man = json.loads(Path(path).read_text())
        if man.get("kind") != "toy":
            raise ValueError(f"{path}: not a toy encoder manifest")
        if man.get("format_version") != ENCODER_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported encoder format {man.get('format_version')}")
        vocab = Vocabulary(man["vocab"])
        if vocab.hash() != man["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        return cls(vocab, man["dim"], man["max_tokens"], man["seed"], man["token_mode"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _extract_vector(payload):
    if isinstance(payload, list):
        return payload
    if isinstance(payload, dict):
        if "embedding" in payload:
            return payload["embedding"]
        data = payload.get("data")
        if isinstance(data, list) and data and isinstance(data[0], dict):
            return data[0].get("embedding")
    raise InvalidEmbedding("invalid embedding: response carries no numeric array")


class RemoteEncoder:
    """Client for an HTTP embedding service.

    POSTs ``{"input": text, "model": model}`` and returns the vector verbatim.
    The credential is read from ``INVERTEXT_API_KEY`` at construction time and
    only kept in the request headers.
    """

    kind = "remote"

    def __init__(self, url: str, model: str, token_mode: str = WORD, timeout: float = 30.0,
                 attempts: int = 3, backoff: float = 1.0, max_backoff: float = 8.0,
                 transport: httpx.BaseTransport | None = None):
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise EncoderError(f"{API_KEY_ENV} is not set")
        self.url = url
        self.model = model
        self.token_mode = token_mode
        self.dim: int | None = None
        self._attempts = attempts
        self._wait = wait_exponential(multiplier=backoff, max=max_backoff)
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {key}"},
        )

    def _post(self, text: str):
        try:
            resp = self._client.post(self.url, json={"input": text, "model": self.model})
        except httpx.TimeoutException as exc:
            raise RetryableEncoderError(f"timeout contacting {self.url}") from exc
        except httpx.TransportError as exc:
            raise RetryableEncoderError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableEncoderError(f"HTTP {resp.status_code}")
        if not resp.is_success:
            raise HTTPStatusError(resp.status_code, resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise InvalidEmbedding("invalid embedding: response is not JSON") from exc

    def encode(self, text: str) -> np.ndarray:
        tokenize(text, self.token_mode)
        retrying = Retrying(
            stop=stop_after_attempt(self._attempts),
            wait=self._wait,
            retry=retry_if_exception_type(RetryableEncoderError),
            reraise=True,
        )
        payload = retrying(self._post, text)
        vec = as_embedding(_extract_vector(payload))
        if self.dim is None:
            self.dim = vec.size
        elif vec.size != self.dim:
            raise DimensionMismatch(f"dimension mismatch: expected {self.dim}, got {vec.size}")
        return vec

    def encode_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return encode_batch(self, texts)

    def close(self):
        self._client.close()


def load_encoder(path) -> ToyEncoder:
    return ToyEncoder.load(path)
