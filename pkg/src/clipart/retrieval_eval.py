"""Retrieval ranks, nearest-neighbour label transfer and per-sample F2."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .embeddings import EmbeddingMatrix, check_normalized

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalReport:
    ret_at_5: float
    ret_at_20: float
    mean_rank: float
    median_rank: float
    per_query_ranks: list[int] = field(repr=False)

    def to_dict(self, with_ranks: bool = False) -> dict:
        d = asdict(self)
        if not with_ranks:
            d.pop("per_query_ranks")
        return d


@dataclass(frozen=True)
class F2Report:
    mean_f2: float
    per_sample_f2: list[float] = field(repr=False)
    threshold: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _square(sim: np.ndarray) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise EvalError(f"similarity matrix must be square, got shape {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise EvalError("similarity matrix has non-finite entries")
    return sim


def rank_true_pairs(sim: np.ndarray) -> np.ndarray:
    """1-based rank of column ``i`` in row ``i``; ties go to the lower column index."""
    sim = _square(sim)
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    higher = (sim > true).sum(axis=1)
    earlier_ties = np.tril(sim == true, k=-1).sum(axis=1)
    return (1 + higher + earlier_ties).astype(np.int64) if n else np.zeros(0, np.int64)


def rank_first_relevant(sim: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """1-based rank of the best-placed relevant column per row (same tie rule).

    With duplicate captions, ``relevant[i, j]`` marks texts identical to the
    query's own caption; row ``i`` must mark column ``i``.
    """
    sim = _square(sim)
    relevant = np.asarray(relevant, dtype=bool)
    if relevant.shape != sim.shape or not np.all(np.diag(relevant)):
        raise EvalError("relevance mask must match the matrix and include the diagonal")
    order = np.lexsort((np.broadcast_to(np.arange(sim.shape[1]), sim.shape), -sim), axis=1)
    hits = np.take_along_axis(relevant, order, axis=1)
    return (hits.argmax(axis=1) + 1).astype(np.int64)


def retrieval_metrics(ranks: Sequence[int] | np.ndarray) -> RetrievalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EvalError("no ranks to summarize")
    if np.any(ranks < 1):
        raise EvalError("ranks are 1-based")
    return RetrievalReport(
        ret_at_5=float(np.mean(ranks <= 5)),
        ret_at_20=float(np.mean(ranks <= 20)),
        mean_rank=float(np.mean(ranks)),
        median_rank=float(np.median(ranks)),
        per_query_ranks=[int(r) for r in ranks],
    )


def _rows(m: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    rows = m.rows if isinstance(m, EmbeddingMatrix) else m
    return np.atleast_2d(np.asarray(rows, dtype=np.float64))


def knn_transfer(train_emb: EmbeddingMatrix | np.ndarray,
                 train_label_sets: Sequence[Iterable[int]],
                 query_emb: EmbeddingMatrix | np.ndarray, k: int = 1) -> list[frozenset[int]]:
    """Copy labels from cosine-nearest training rows.

    For ``k > 1`` a label is kept if it occurs in at least ``ceil(k/2)`` of
    the ``k`` neighbours. Ties in similarity go to the lower training index.
    """
    train, query = _rows(train_emb), _rows(query_emb)
    if train.shape[0] == 0 or len(train_label_sets) == 0:
        raise EvalError("empty training set")
    if train.shape[0] != len(train_label_sets):
        raise EvalError("training embeddings and label sets are not aligned")
    if train.shape[1] != query.shape[1]:
        raise EvalError(f"dim mismatch: {train.shape[1]} vs {query.shape[1]}")
    if k < 1:
        raise EvalError("k must be >= 1")
    check_normalized(train, "training")
    check_normalized(query, "query")
    labels = [frozenset(s) for s in train_label_sets]
    sims = query @ train.T
    if k == 1:
        return [labels[j] for j in np.argmax(sims, axis=1)]
    k = min(k, train.shape[0])
    need = math.ceil(k / 2)
    out = []
    for row in sims:
        top = np.argsort(-row, kind="stable")[:k]
        counts: dict[int, int] = {}
        for j in top:
            for a in labels[j]:
                counts[a] = counts.get(a, 0) + 1
        out.append(frozenset(a for a, c in counts.items() if c >= need))
    return out


def f2_per_sample(pred: Iterable, truth: Iterable) -> float:
    pred, truth = set(pred), set(truth)
    if not pred and not truth:
        return 1.0
    if not pred or not truth:
        return 0.0
    tp = len(pred & truth)
    fn = len(truth - pred)
    fp = len(pred - truth)
    return 5.0 * tp / (5.0 * tp + 4.0 * fn + fp)


def f2_report(preds: Sequence[Iterable], truths: Sequence[Iterable],
              threshold: float | None = None) -> F2Report:
    if len(preds) != len(truths):
        raise EvalError("predictions and truths are not aligned")
    if not truths:
        raise EvalError("nothing to score")
    scores = [f2_per_sample(p, t) for p, t in zip(preds, truths)]
    return F2Report(float(np.mean(scores)), scores, threshold)


def _f2_matrix(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    tp = np.sum(pred & truth, axis=1).astype(np.float64)
    fn = np.sum(~pred & truth, axis=1)
    fp = np.sum(pred & ~truth, axis=1)
    denom = 5.0 * tp + 4.0 * fn + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        f2 = np.where(denom > 0, 5.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    both_empty = ~pred.any(axis=1) & ~truth.any(axis=1)
    return np.where(both_empty, 1.0, f2)


def label_matrix(label_sets: Sequence[Iterable[int]], columns: Sequence[int]) -> np.ndarray:
    """Boolean indicator matrix with one column per attribute id in ``columns``."""
    index = {a: j for j, a in enumerate(columns)}
    out = np.zeros((len(label_sets), len(columns)), dtype=bool)
    for i, s in enumerate(label_sets):
        for a in s:
            if a not in index:
                raise EvalError(f"attribute {a} is not a known column")
            out[i, index[a]] = True
    return out


def tune_threshold(probabilities: np.ndarray, truths: np.ndarray,
                   grid: Sequence[float] = THRESHOLD_GRID) -> tuple[float, F2Report]:
    """Global threshold maximizing mean per-sample F2; ties keep the lower threshold.

    An attribute is predicted when its probability is ``>= threshold``.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    truth = np.asarray(truths, dtype=bool)
    if probs.ndim != 2 or probs.shape != truth.shape:
        raise EvalError(f"shape mismatch: {probs.shape} vs {truth.shape}")
    best_t, best_scores, best_mean = None, None, -1.0
    for t in grid:
        scores = _f2_matrix(probs >= t, truth)
        mean = float(np.mean(scores))
        if mean > best_mean:
            best_t, best_scores, best_mean = float(t), scores, mean
    return best_t, F2Report(best_mean, [float(s) for s in best_scores], best_t)


def write_report(report: RetrievalReport | F2Report | dict, stream: TextIO, **extra) -> None:
    data = report if isinstance(report, dict) else report.to_dict()
    data = {**data, **extra}
    json.dump(data, stream, indent=2, sort_keys=True)
    stream.write("\n")


def write_ranks_csv(query_ids: Sequence[str], ranks: Sequence[int], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["query_id", "rank"])
    for q, r in zip(query_ids, ranks):
        writer.writerow([q, int(r)])
