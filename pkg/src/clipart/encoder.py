"""Desk-scale dual encoder: hashed bag-of-words text features and two small MLP towers.

Each tower is ``normalize(proj(relu(base(x))))`` with affine ``base`` and
``proj``. Weights are stored input-major, so an affine map is ``x @ W + b``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embeddings import DEFAULT_DIM, normalize_rows

DEFAULT_BUCKETS = 4096
INIT_TEMPERATURE = 1 / 0.07
MAX_LOG_TEMPERATURE = math.log(100.0)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TOKEN = re.compile(r"[^\W_]+")


class EncoderError(ValueError):
    pass


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class TextFeaturizerConfig:
    vocab_buckets: int = DEFAULT_BUCKETS
    hash: Callable[[str], int] = field(default=fnv1a_64, compare=False)

    def __post_init__(self) -> None:
        if self.vocab_buckets < 2:
            raise EncoderError("vocab_buckets must be at least 2")


def featurize_text(text: str, cfg: TextFeaturizerConfig = TextFeaturizerConfig()) -> np.ndarray:
    """L2-normalized token counts over ``vocab_buckets`` hash buckets (dense)."""
    tokens = tokenize(text)
    if not tokens:
        raise EncoderError(f"no tokens in {text!r}")
    vec = np.zeros(cfg.vocab_buckets)
    for tok in tokens:
        vec[cfg.hash(tok) % cfg.vocab_buckets] += 1.0
    return vec / np.linalg.norm(vec)


TENSOR_NAMES = (
    "image_base.weight", "image_base.bias", "image_proj.weight", "image_proj.bias",
    "text_base.weight", "text_base.bias", "text_proj.weight", "text_proj.bias",
    "log_temperature",
)
BASE_TENSORS = ("image_base.weight", "image_base.bias", "text_base.weight", "text_base.bias")


@dataclass
class DualEncoderParams:
    """All trainable tensors, keyed by name; ``log_temperature`` is a 0-d array."""

    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        missing = set(TENSOR_NAMES) - set(self.tensors)
        if missing:
            raise EncoderError(f"missing tensors: {sorted(missing)}")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise EncoderError(f"tensor {name} has non-finite entries")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def d_img(self) -> int:
        return self.tensors["image_base.weight"].shape[0]

    @property
    def hidden(self) -> int:
        return self.tensors["image_base.weight"].shape[1]

    @property
    def d_emb(self) -> int:
        return self.tensors["image_proj.weight"].shape[1]

    @property
    def vocab_buckets(self) -> int:
        return self.tensors["text_base.weight"].shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(min(float(self.tensors["log_temperature"]), MAX_LOG_TEMPERATURE))

    def copy(self) -> DualEncoderParams:
        return DualEncoderParams({k: v.copy() for k, v in self.tensors.items()})


def init_params(d_img: int, hidden: int, d_emb: int = DEFAULT_DIM,
                vocab_buckets: int = DEFAULT_BUCKETS, seed: int = 0) -> DualEncoderParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, temperature 1/0.07."""
    if min(d_img, hidden, d_emb, vocab_buckets) < 1:
        raise EncoderError("all dimensions must be positive")
    rng = np.random.default_rng(seed)

    def weight(fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    tensors = {
        "image_base.weight": weight(d_img, hidden),
        "image_base.bias": np.zeros(hidden),
        "image_proj.weight": weight(hidden, d_emb),
        "image_proj.bias": np.zeros(d_emb),
        "text_base.weight": weight(vocab_buckets, hidden),
        "text_base.bias": np.zeros(hidden),
        "text_proj.weight": weight(hidden, d_emb),
        "text_proj.bias": np.zeros(d_emb),
        "log_temperature": np.array(math.log(INIT_TEMPERATURE)),
    }
    return DualEncoderParams(tensors)


@dataclass
class _TowerCache:
    x: np.ndarray
    pre: np.ndarray
    hid: np.ndarray
    z: np.ndarray
    out: np.ndarray


def _tower_forward(x: np.ndarray, p: DualEncoderParams, side: str) -> _TowerCache:
    w1 = p[f"{side}_base.weight"]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != w1.shape[0]:
        raise EncoderError(f"{side} input has dim {x.shape[1]}, expected {w1.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise EncoderError(f"{side} input has non-finite entries")
    pre = x @ w1 + p[f"{side}_base.bias"]
    hid = np.maximum(pre, 0.0)
    z = hid @ p[f"{side}_proj.weight"] + p[f"{side}_proj.bias"]
    return _TowerCache(x, pre, hid, z, normalize_rows(z))


def _tower_backward(d_out: np.ndarray, cache: _TowerCache, p: DualEncoderParams,
                    side: str) -> dict[str, np.ndarray]:
    norm = np.linalg.norm(cache.z, axis=1, keepdims=True)
    y = cache.out
    dz = (d_out - y * np.sum(y * d_out, axis=1, keepdims=True)) / norm
    dhid = dz @ p[f"{side}_proj.weight"].T
    dpre = dhid * (cache.pre > 0)
    return {
        f"{side}_proj.weight": cache.hid.T @ dz,
        f"{side}_proj.bias": dz.sum(axis=0),
        f"{side}_base.weight": cache.x.T @ dpre,
        f"{side}_base.bias": dpre.sum(axis=0),
    }


def encode_image(features: np.ndarray, p: DualEncoderParams) -> np.ndarray:
    """Unit-norm image embedding(s); accepts one vector or a batch of rows."""
    out = _tower_forward(features, p, "image").out
    return out[0] if np.ndim(features) == 1 else out


def encode_text(features: np.ndarray, p: DualEncoderParams) -> np.ndarray:
    out = _tower_forward(features, p, "text").out
    return out[0] if np.ndim(features) == 1 else out
