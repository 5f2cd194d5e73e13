"""Embedding-side defenses: additive Gaussian noise and int8 quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMIN, QMAX = -128, 127
NOISE_GRID = (0.0, 0.001, 0.01, 0.1, 1.0)


class DegenerateEmbedding(ValueError):
    pass


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def noise_embed(embedding, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add isotropic standard-normal noise scaled by ``noise_scale``."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    embedding = np.asarray(embedding, dtype=np.float64)
    if noise_scale == 0:
        return embedding.copy()
    return embedding + noise_scale * rng.standard_normal(embedding.shape)


@dataclass(frozen=True)
class AbsmaxQuantized:
    q: np.ndarray
    scale: float

    def to_record(self) -> dict:
        return {"q": self.q.tolist(), "scheme": "absmax", "scale": self.scale, "zero_point": None}


@dataclass(frozen=True)
class ZeropointQuantized:
    q: np.ndarray
    scale: float
    zero_point: int

    def to_record(self) -> dict:
        return {"q": self.q.tolist(), "scheme": "zeropoint", "scale": self.scale, "zero_point": self.zero_point}


def from_record(rec: dict):
    q = np.asarray(rec["q"], dtype=np.int64)
    if q.size and (q.min() < QMIN or q.max() > QMAX):
        raise ValueError("quantized entries outside [-128, 127]")
    if rec["scheme"] == "absmax":
        return AbsmaxQuantized(q, float(rec["scale"]))
    if rec["scheme"] == "zeropoint":
        return ZeropointQuantized(q, float(rec["scale"]), int(rec["zero_point"]))
    raise ValueError(f"unknown scheme {rec['scheme']!r}")


def absmax_quantize(embedding) -> AbsmaxQuantized:
    """int8 codes scaled by the largest absolute entry (not the signed max)."""
    embedding = np.asarray(embedding, dtype=np.float64)
    scale = float(np.max(np.abs(embedding))) if embedding.size else 0.0
    if scale == 0.0:
        raise DegenerateEmbedding("degenerate embedding: all entries are zero")
    q = np.clip(round_half_away(embedding / scale * 127.0), QMIN, QMAX).astype(np.int64)
    return AbsmaxQuantized(q, scale)


def absmax_dequantize(aq: AbsmaxQuantized) -> np.ndarray:
    return aq.scale / 127.0 * aq.q.astype(np.float64)


def zeropoint_quantize(embedding) -> ZeropointQuantized:
    """Affine int8 codes: the value range is stretched over 255 steps and shifted to [-128, 127]."""
    embedding = np.asarray(embedding, dtype=np.float64)
    lo, hi = float(embedding.min()), float(embedding.max())
    if hi <= lo:
        raise DegenerateEmbedding("zero dynamic range")
    scale = 255.0 / (hi - lo)
    zero_point = int(-round_half_away(scale * lo) - 128)
    q = np.clip(round_half_away(scale * embedding + zero_point), QMIN, QMAX).astype(np.int64)
    return ZeropointQuantized(q, scale, zero_point)


def zeropoint_dequantize(zq: ZeropointQuantized) -> np.ndarray:
    return (zq.q.astype(np.float64) - zq.zero_point) / zq.scale


NONE, NOISE, ABSMAX, ZEROPOINT = "none", "noise", "absmax", "zeropoint"
KINDS = (NONE, NOISE, ABSMAX, ZEROPOINT)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = NONE
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        extra = set(d) - {"kind", "noise_scale", "seed"}
        if extra:
            raise ValueError(f"unknown defense keys: {sorted(extra)}")
        return cls(d.get("kind", NONE), float(d.get("noise_scale", 0.0)), int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == NOISE:
            out.update({"noise_scale": self.noise_scale, "seed": self.seed})
        return out

    def label(self) -> str:
        return f"noise({self.noise_scale:g})" if self.kind == NOISE else self.kind


def apply_defense(cfg: DefenseConfig, embedding, rng: np.random.Generator | None = None) -> np.ndarray:
    """Return the embedding a receiver would work with under ``cfg``.

    Quantizers simulate transmit-and-restore: quantize, then dequantize.
    """
    e = np.asarray(embedding, dtype=np.float64)
    if cfg.kind == NONE:
        out = e.copy()
    elif cfg.kind == NOISE:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        out = noise_embed(e, cfg.noise_scale, rng)
    elif cfg.kind == ABSMAX:
        out = absmax_dequantize(absmax_quantize(e))
    else:
        out = zeropoint_dequantize(zeropoint_quantize(e))
    assert out.shape == e.shape and np.all(np.isfinite(out))
    return out
