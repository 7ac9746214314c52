import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipart.retrieval_eval import (EvalError, f2_per_sample, f2_report, knn_transfer,
                                    label_matrix, rank_first_relevant, rank_true_pairs,
                                    retrieval_metrics, tune_threshold)


def brute_force_ranks(sim):
    ranks = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        ranks.append(order.index(i) + 1)
    return ranks


def test_identity_ranks():
    assert rank_true_pairs(np.eye(5)).tolist() == [1] * 5


def test_single_row_rank():
    sim = np.array([[0.1, 0.9, 0.5], [0, 1, 0], [0, 0, 1]])
    assert rank_true_pairs(sim)[0] == 3


def test_tie_break_by_index():
    assert rank_true_pairs(np.full((4, 4), 0.3)).tolist() == [1, 2, 3, 4]


def test_non_square():
    with pytest.raises(EvalError):
        rank_true_pairs(np.ones((2, 3)))


@given(st.integers(1, 40), st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=60, deadline=None)
def test_ranks_match_brute_force(n, seed, coarse):
    rng = np.random.default_rng(seed)
    sim = rng.normal(size=(n, n))
    if coarse:
        sim = np.round(sim, 1)
    assert rank_true_pairs(sim).tolist() == brute_force_ranks(sim)


@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_ranks_invariant_under_monotone_transform(n, seed):
    sim = np.round(np.random.default_rng(seed).uniform(-1, 1, size=(n, n)), 2)
    assert np.array_equal(rank_true_pairs(sim), rank_true_pairs(np.exp(3 * sim) - 7))


def test_metrics_examples():
    r = retrieval_metrics([1, 1, 1])
    assert (r.ret_at_5, r.mean_rank, r.median_rank) == (1.0, 1.0, 1.0)
    r = retrieval_metrics([1, 6, 21, 100])
    assert (r.ret_at_5, r.ret_at_20, r.mean_rank, r.median_rank) == (0.25, 0.5, 32.0, 13.5)


def test_metrics_empty():
    with pytest.raises(EvalError):
        retrieval_metrics([])


def test_uniform_random_ret_at_5_near_chance():
    m = 1000
    rng = np.random.default_rng(11)
    ranks = rank_true_pairs(rng.uniform(size=(m, m)))
    report = retrieval_metrics(ranks)
    p = 5 / m
    sigma = math.sqrt(p * (1 - p) / m)
    assert abs(report.ret_at_5 - p) <= 3 * sigma
    assert report.ret_at_5 <= report.ret_at_20
    assert 1 <= min(ranks) and max(ranks) <= m


def test_first_relevant_rank():
    sim = np.array([[0.2, 0.9, 0.1], [0.5, 0.4, 0.3], [0.0, 0.0, 1.0]])
    rel = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
    assert rank_first_relevant(sim, rel).tolist() == [1, 1, 1]
    assert rank_first_relevant(sim, np.eye(3, dtype=bool)).tolist() == rank_true_pairs(sim).tolist()


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_knn_self_match(rng):
    train = unit(rng.normal(size=(6, 4)))
    labels = [{i} for i in range(6)]
    assert knn_transfer(train, labels, train[[3]]) == [frozenset({3})]


def test_knn_antipodal():
    train = np.array([[1.0, 0.0], [-1.0, 0.0]])
    query = unit(np.array([[0.3, 0.2]]))
    assert knn_transfer(train, [{"pos"}, {"neg"}], query) == [frozenset({"pos"})]


def test_knn_ties_to_lowest_index():
    train = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert knn_transfer(train, [{1}, {2}], np.array([[1.0, 0.0]])) == [frozenset({1})]


def test_knn_majority_vote():
    train = unit(np.array([[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [-1.0, 0.0]]))
    labels = [{1, 2}, {1}, {3}, {9}]
    assert knn_transfer(train, labels, np.array([[1.0, 0.0]]), k=3) == [frozenset({1})]


def test_knn_empty_train():
    with pytest.raises(EvalError):
        knn_transfer(np.zeros((0, 2)), [], np.array([[1.0, 0.0]]))


def test_knn_ignores_far_appended_rows(rng):
    train = unit(rng.normal(size=(10, 5)))
    query = unit(rng.normal(size=(4, 5)))
    labels = [{i} for i in range(10)]
    before = knn_transfer(train, labels, query)
    best = (query @ train.T).max(axis=1)
    extra = unit(-query.mean(axis=0, keepdims=True))
    assert np.all(query @ extra.T < best[:, None])
    after = knn_transfer(np.vstack([train, extra]), labels + [{"far"}], query)
    assert before == after


def test_f2_examples():
    assert f2_per_sample({"a", "b"}, {"a", "b"}) == 1.0
    assert f2_per_sample({"a"}, {"a", "b"}) == pytest.approx(5 / 9, abs=1e-12)
    assert f2_per_sample({"a", "x", "y"}, {"a"}) == pytest.approx(5 / 7, abs=1e-12)
    assert f2_per_sample({"a"}, {"a", "b"}) < f2_per_sample({"a", "x", "y"}, {"a"})
    assert f2_per_sample(set(), set()) == 1.0
    assert f2_per_sample(set(), {"a"}) == 0.0
    assert f2_per_sample({"a"}, set()) == 0.0


@given(st.frozensets(st.integers(0, 8)), st.frozensets(st.integers(0, 8), min_size=1))
@settings(max_examples=200, deadline=None)
def test_f2_bounds(pred, truth):
    f = f2_per_sample(pred, truth)
    assert 0.0 <= f <= 1.0
    assert (f == 1.0) == (pred == truth)


def test_f2_report_mean():
    rep = f2_report([{1}, {1, 2}], [{1}, {2}])
    assert rep.mean_f2 == np.mean(rep.per_sample_f2)


def test_threshold_separated_case():
    truth = np.array([[1, 0, 1], [0, 1, 0]], dtype=bool)
    eps = 1e-3
    probs = np.where(truth, 1 - eps, eps)
    t, rep = tune_threshold(probs, truth)
    assert t == 0.05 and rep.mean_f2 == 1.0


def test_threshold_below_half():
    truth = np.array([[1, 0, 1], [0, 1, 0]], dtype=bool)
    t, rep = tune_threshold(np.full(truth.shape, 0.5 - 1e-3), truth)
    assert t < 0.5 and rep.mean_f2 > 0


def test_threshold_matches_grid_oracle(rng):
    probs = rng.uniform(0.01, 0.99, size=(20, 10))
    truth = rng.uniform(size=(20, 10)) < 0.3
    cols = list(range(10))
    best_t, best = None, -1.0
    for t in [0.05 * i for i in range(1, 20)]:
        preds = [{j for j in cols if probs[i, j] >= round(t, 2)} for i in range(20)]
        truths = [{j for j in cols if truth[i, j]} for i in range(20)]
        score = sum(f2_per_sample(p, q) for p, q in zip(preds, truths)) / 20
        if score > best + 1e-12:
            best_t, best = round(t, 2), score
    t, rep = tune_threshold(probs, truth)
    assert t == best_t and rep.mean_f2 == pytest.approx(best, abs=1e-12)


def test_threshold_shape_mismatch():
    with pytest.raises(EvalError):
        tune_threshold(np.ones((2, 3)) * 0.5, np.ones((3, 2), dtype=bool))


def test_label_matrix():
    m = label_matrix([{5, 9}, set()], [9, 5, 1])
    assert m.tolist() == [[True, True, False], [False, False, False]]
