"""Symmetric InfoNCE over a batch of paired unit embeddings, with closed-form gradients.

For logits ``L = s * I @ T.T`` with ``s = exp(min(tau, ln 100))``::

    loss = (CE_rows(L) + CE_rows(L.T)) / 2

where ``CE_rows`` is the mean softmax cross-entropy with the diagonal as
targets. The gradient w.r.t. the logits is
``((softmax_rows(L) - E) + (softmax_cols(L) - E)) / (2N)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import NORMALIZED_TOL
from .encoder import MAX_LOG_TEMPERATURE


class ContrastiveError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveBatch:
    """Row ``i`` of ``image_emb`` and ``text_emb`` form a positive pair."""

    image_emb: np.ndarray
    text_emb: np.ndarray
    check_norms: bool = True

    def __post_init__(self) -> None:
        img = np.asarray(self.image_emb, dtype=np.float64)
        txt = np.asarray(self.text_emb, dtype=np.float64)
        if img.ndim != 2 or img.shape != txt.shape:
            raise ContrastiveError(f"shape mismatch: {img.shape} vs {txt.shape}")
        if img.shape[0] < 2:
            raise ContrastiveError("a batch needs at least 2 pairs")
        if self.check_norms:
            for name, m in (("image", img), ("text", txt)):
                if np.max(np.abs(np.linalg.norm(m, axis=1) - 1.0)) > NORMALIZED_TOL:
                    raise ContrastiveError(f"{name} rows are not unit norm")
        object.__setattr__(self, "image_emb", img)
        object.__setattr__(self, "text_emb", txt)

    @property
    def size(self) -> int:
        return self.image_emb.shape[0]

    def transposed(self) -> ContrastiveBatch:
        return ContrastiveBatch(self.text_emb, self.image_emb, self.check_norms)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _scale(log_temperature: float) -> tuple[float, bool]:
    lt = float(log_temperature)
    if not np.isfinite(lt):
        raise ContrastiveError("log_temperature is not finite")
    clamped = lt > MAX_LOG_TEMPERATURE
    return float(np.exp(MAX_LOG_TEMPERATURE if clamped else lt)), clamped


def _logits(batch: ContrastiveBatch, scale: float) -> tuple[np.ndarray, np.ndarray]:
    sims = batch.image_emb @ batch.text_emb.T
    logits = scale * sims
    if not np.all(np.isfinite(logits)):
        raise ContrastiveError("non-finite logits")
    return sims, logits


def softmax_ce_grad(logits: np.ndarray) -> np.ndarray:
    """Gradient of mean row-wise cross-entropy (diagonal targets) w.r.t. ``logits``."""
    n = logits.shape[0]
    return (np.exp(_log_softmax(logits)) - np.eye(n)) / n


def infonce_loss(batch: ContrastiveBatch, log_temperature: float) -> float:
    scale, _ = _scale(log_temperature)
    _, logits = _logits(batch, scale)
    rows = -np.mean(np.diag(_log_softmax(logits)))
    cols = -np.mean(np.diag(_log_softmax(logits.T)))
    return float(0.5 * (rows + cols))


def infonce_loss_and_grad(batch: ContrastiveBatch, log_temperature: float
                          ) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss and gradients w.r.t. image rows, text rows and log-temperature."""
    scale, clamped = _scale(log_temperature)
    sims, logits = _logits(batch, scale)
    lsm_rows = _log_softmax(logits)
    lsm_cols = _log_softmax(logits.T)
    loss = 0.5 * (-np.mean(np.diag(lsm_rows)) - np.mean(np.diag(lsm_cols)))

    n = batch.size
    eye = np.eye(n)
    d_logits = 0.5 * ((np.exp(lsm_rows) - eye) + (np.exp(lsm_cols) - eye).T) / n
    d_sims = scale * d_logits
    d_image = d_sims @ batch.text_emb
    d_text = d_sims.T @ batch.image_emb
    d_log_t = 0.0 if clamped else float(scale * np.sum(d_logits * sims))
    return float(loss), d_image, d_text, d_log_t
