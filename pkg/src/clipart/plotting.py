"""Figures written next to the JSON/CSV outputs of the CLI."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .retrieval_eval import THRESHOLD_GRID, _f2_matrix  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
}


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    # no Software/date metadata, so identical inputs give identical bytes
    suffix = os.path.splitext(str(path))[1].lower()
    meta = {".png": {"Software": None}, ".svg": {"Date": None},
            ".pdf": {"CreationDate": None}}.get(suffix, {})
    fig.savefig(path, metadata=meta)
    plt.close(fig)


def plot_loss_history(history: Sequence[dict], path: str | os.PathLike,
                      freeze_epochs: int | None = None, title: str = "contrastive loss") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["loss"] for h in history], marker="o", ms=3)
        if freeze_epochs:
            ax.axvspan(-0.5, freeze_epochs - 0.5, color="0.85", zorder=0, label="base frozen")
            ax.legend(frameon=False)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean InfoNCE loss")
        ax.set_title(title)
        _save(fig, path)


def plot_rank_histogram(ranks: Sequence[int], path: str | os.PathLike,
                        title: str = "rank of the true pair") -> None:
    ranks = np.asarray(ranks)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        top = int(ranks.max()) if ranks.size else 1
        ax.hist(ranks, bins=np.arange(0.5, top + 1.5, max(1, top // 50)), color="C0")
        for k, style in ((5, "--"), (20, ":")):
            ax.axvline(k + 0.5, color="k", ls=style, lw=1, label=f"top {k}")
        ax.set_xlabel("rank")
        ax.set_ylabel("queries")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_threshold_sweep(probabilities: np.ndarray, truths: np.ndarray,
                         path: str | os.PathLike, chosen: float | None = None) -> None:
    probs = np.asarray(probabilities)
    truth = np.asarray(truths, dtype=bool)
    scores = [float(np.mean(_f2_matrix(probs >= t, truth))) for t in THRESHOLD_GRID]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(THRESHOLD_GRID, scores, marker="o", ms=3)
        if chosen is not None:
            ax.axvline(chosen, color="C3", lw=1, label=f"chosen {chosen:.2f}")
            ax.legend(frameon=False)
        ax.set_xlabel("threshold")
        ax.set_ylabel("mean per-sample F2")
        ax.set_ylim(0, 1.02)
        _save(fig, path)
