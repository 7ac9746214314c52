"""Contrastive pre-training, multi-label head fine-tuning and checkpoints.

Checkpoint layout (little-endian)::

    b"CKPT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | float32 payload
    u32 metadata length | UTF-8 JSON {"config": ..., "epoch": ..., ...}
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .captioner import CaptionVariant, generate_variants, record_seed, sample_caption
from .contrastive import ContrastiveBatch, infonce_loss_and_grad
from .dataset import AnnotatedRecord, AttributeTaxonomy, ParentClass
from .encoder import (BASE_TENSORS, MAX_LOG_TEMPERATURE, DualEncoderParams,
                      TextFeaturizerConfig, _tower_backward, _tower_forward,
                      featurize_text, init_params)
from .optim import Ranger

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class TrainingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    freeze_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    drop_prob: float = 0.25
    n_variants: int = 16
    exclude_categories: tuple[str, ...] = ()
    d_emb: int = 512
    hidden: int | None = None
    vocab_buckets: int = 4096
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    head_lr: float = 0.3

    def __post_init__(self) -> None:
        if self.epochs < 0 or not 0 <= self.freeze_epochs <= self.epochs:
            raise TrainingError("need 0 <= freeze_epochs <= epochs")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2")
        excl = tuple(sorted({ParentClass(c).value for c in self.exclude_categories}))
        object.__setattr__(self, "exclude_categories", excl)

    @property
    def hidden_size(self) -> int:
        return self.hidden or self.d_emb

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exclude_categories"] = list(self.exclude_categories)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        data = dict(data)
        data["exclude_categories"] = tuple(data.get("exclude_categories", ()))
        return cls(**data)


# -- contrastive pre-training ----------------------------------------------------


def caption_pool(records: Sequence[AnnotatedRecord], taxonomy: AttributeTaxonomy,
                 config: TrainConfig) -> list[list[CaptionVariant]]:
    return [generate_variants(rec, taxonomy, config.n_variants, config.drop_prob,
                              config.exclude_categories, record_seed(config.seed, i))
            for i, rec in enumerate(records)]


def _features(records: Sequence[AnnotatedRecord]) -> np.ndarray:
    if any(r.features is None for r in records):
        raise TrainingError("every record needs a feature vector")
    return np.stack([r.features for r in records])


def train_contrastive(records: Sequence[AnnotatedRecord], taxonomy: AttributeTaxonomy,
                      config: TrainConfig,
                      on_epoch: Callable[[int, DualEncoderParams], None] | None = None,
                      ) -> tuple[DualEncoderParams, list[dict]]:
    """Train the dual encoder with symmetric InfoNCE and Ranger.

    Each epoch is a seeded shuffle cut into full batches (the remainder is
    dropped). For every item one caption variant is drawn uniformly. Base
    layers get zero gradient for the first ``freeze_epochs`` epochs.
    ``on_epoch(epoch, params)`` is called before each epoch and once more
    after the last one.
    """
    n = len(records)
    if n < config.batch_size:
        raise TrainingError(f"{n} records is fewer than one batch of {config.batch_size}")
    feats = _features(records)
    pool = caption_pool(records, taxonomy, config)
    featurizer = TextFeaturizerConfig(config.vocab_buckets)
    text_cache: dict[str, np.ndarray] = {}
    for variants in pool:
        for v in variants:
            if v.text not in text_cache:
                text_cache[v.text] = featurize_text(v.text, featurizer)

    params = init_params(feats.shape[1], config.hidden_size, config.d_emb,
                         config.vocab_buckets, config.seed)
    opt = Ranger(params.tensors, lr=config.lr, k=config.lookahead_k,
                 alpha=config.lookahead_alpha)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    ids = [r.item_id for r in records]

    history = []
    for epoch in range(config.epochs):
        if on_epoch is not None:
            on_epoch(epoch, params)
        frozen = epoch < config.freeze_epochs
        order = rng.permutation(n)
        losses, skipped = [], 0
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]
            texts = [sample_caption(pool[i], rng).text for i in idx]
            if len({ids[i] for i in idx}) < len(idx):
                skipped += 1
                log.warning("epoch %d: batch at %d has duplicate item ids; skipped", epoch, start)
                continue
            loss, grads = contrastive_step_grads(params, feats[idx],
                                                 np.stack([text_cache[t] for t in texts]))
            if frozen:
                for name in BASE_TENSORS:
                    grads[name] = np.zeros_like(grads[name])
            opt.step(grads)
            lt = params.tensors["log_temperature"]
            if lt > MAX_LOG_TEMPERATURE:
                lt[...] = MAX_LOG_TEMPERATURE
            losses.append(loss)
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "loss": mean, "skipped_batches": skipped})
        log.info("epoch %d loss %.6f%s", epoch, mean, " (frozen base)" if frozen else "")
    if on_epoch is not None:
        on_epoch(config.epochs, params)
    return params, history


def contrastive_step_grads(params: DualEncoderParams, image_x: np.ndarray,
                           text_x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Batch InfoNCE loss and gradients for every tensor in ``params``."""
    img = _tower_forward(image_x, params, "image")
    txt = _tower_forward(text_x, params, "text")
    loss, d_img, d_txt, d_lt = infonce_loss_and_grad(
        ContrastiveBatch(img.out, txt.out), float(params["log_temperature"]))
    grads = _tower_backward(d_img, img, params, "image")
    grads.update(_tower_backward(d_txt, txt, params, "text"))
    grads["log_temperature"] = np.array(d_lt)
    return loss, grads


# -- multi-label head ------------------------------------------------------------

PROB_EPS = 1e-12


@dataclass
class ClassifierHead:
    """Independent sigmoid per attribute on top of a frozen embedding."""

    weight: np.ndarray
    bias: np.ndarray
    attribute_ids: tuple[int, ...]

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return np.atleast_2d(emb) @ self.weight + self.bias

    def predict_proba(self, emb: np.ndarray) -> np.ndarray:
        z = self.logits(emb)
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)

    @classmethod
    def zeros(cls, d_emb: int, attribute_ids: Sequence[int]) -> ClassifierHead:
        return cls(np.zeros((d_emb, len(attribute_ids))), np.zeros(len(attribute_ids)),
                   tuple(attribute_ids))


def bce(head: ClassifierHead, emb: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross-entropy over samples and attributes."""
    z = head.logits(emb)
    return float(np.mean(np.logaddexp(0.0, z) - targets * z))


def _targets(label_sets: Sequence[Sequence[int]], columns: Sequence[int]) -> np.ndarray:
    index = {a: j for j, a in enumerate(columns)}
    y = np.zeros((len(label_sets), len(columns)))
    for i, labels in enumerate(label_sets):
        for a in labels:
            if a not in index:
                raise TrainingError(f"attribute {a} is outside the taxonomy")
            y[i, index[a]] = 1.0
    return y


def train_classifier(embeddings: np.ndarray, label_sets: Sequence[Sequence[int]],
                     taxonomy: AttributeTaxonomy, config: TrainConfig,
                     ) -> tuple[ClassifierHead, list[dict]]:
    """Fit a zero-initialized affine head by mean per-attribute BCE with Ranger."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] != len(label_sets):
        raise TrainingError("embeddings and label sets are not row-aligned")
    columns = taxonomy.ids
    y = _targets(label_sets, columns)
    head = ClassifierHead.zeros(x.shape[1], columns)
    tensors = {"head.weight": head.weight, "head.bias": head.bias}
    opt = Ranger(tensors, lr=config.head_lr, k=config.lookahead_k,
                 alpha=config.lookahead_alpha)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 3)))
    n = x.shape[0]
    batch = min(config.batch_size, n)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            xb, yb = x[idx], y[idx]
            z = head.logits(xb)
            losses.append(float(np.mean(np.logaddexp(0.0, z) - yb * z)))
            dz = (1.0 / (1.0 + np.exp(-z)) - yb) / yb.size
            opt.step({"head.weight": xb.T @ dz, "head.bias": dz.sum(axis=0)})
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return head, history


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in self.tensors.items()}


def checkpoint_from_params(params: DualEncoderParams | None, config: TrainConfig | dict,
                           epoch: int, head: ClassifierHead | None = None) -> Checkpoint:
    tensors = dict(params.tensors) if params is not None else {}
    meta = {}
    if head is not None:
        tensors["head.weight"] = head.weight
        tensors["head.bias"] = head.bias
        meta["head_attribute_ids"] = list(head.attribute_ids)
    cfg = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
    return Checkpoint(tensors, cfg, epoch, meta)


def params_from_checkpoint(ckpt: Checkpoint) -> DualEncoderParams:
    return DualEncoderParams({k: ckpt.tensors[k].astype(np.float64)
                              for k in ckpt.tensors if not k.startswith("head.")})


def head_from_checkpoint(ckpt: Checkpoint) -> ClassifierHead:
    if "head.weight" not in ckpt.tensors:
        raise CheckpointError("checkpoint has no classifier head")
    return ClassifierHead(ckpt.tensors["head.weight"].astype(np.float64),
                          ckpt.tensors["head.bias"].astype(np.float64),
                          tuple(ckpt.meta["head_attribute_ids"]))


def expected_shapes(d_img: int, hidden: int, d_emb: int, vocab_buckets: int
                    ) -> dict[str, tuple[int, ...]]:
    return {
        "image_base.weight": (d_img, hidden), "image_base.bias": (hidden,),
        "image_proj.weight": (hidden, d_emb), "image_proj.bias": (d_emb,),
        "text_base.weight": (vocab_buckets, hidden), "text_base.bias": (hidden,),
        "text_proj.weight": (hidden, d_emb), "text_proj.bias": (d_emb,),
        "log_temperature": (),
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    meta = json.dumps({"config": ckpt.config, "epoch": ckpt.epoch, **ckpt.meta},
                      sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out


def load_checkpoint(path: str | os.PathLike,
                    shapes: Mapping[str, tuple[int, ...]] | None = None) -> Checkpoint:
    """Parse a whole checkpoint; optionally check tensor shapes against ``shapes``."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    _, version, count = r.take("<4sII")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        try:
            name = r.raw(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: tensor name is not UTF-8") from None
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        size = math.prod(dims)
        payload = r.raw(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (meta_len,) = r.take("<I")
    try:
        meta = json.loads(r.raw(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata") from None
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    if shapes is not None:
        for name, shape in shapes.items():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    config = meta.pop("config", {})
    epoch = meta.pop("epoch", 0)
    return Checkpoint(tensors, config, epoch, meta)


def write_history(history: Sequence[dict], stream) -> None:
    for row in history:
        stream.write(json.dumps(row, sort_keys=True) + "\n")


def embed_records(params: DualEncoderParams, records: Sequence[AnnotatedRecord]) -> np.ndarray:
    return _tower_forward(_features(records), params, "image").out


def embed_texts(params: DualEncoderParams, texts: Sequence[str], vocab_buckets: int | None = None
                ) -> np.ndarray:
    cfg = TextFeaturizerConfig(vocab_buckets or params.vocab_buckets)
    return _tower_forward(np.stack([featurize_text(t, cfg) for t in texts]), params, "text").out
