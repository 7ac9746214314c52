import math

import numpy as np
import pytest

from clipart.contrastive import (ContrastiveBatch, ContrastiveError, infonce_loss,
                                 infonce_loss_and_grad, softmax_ce_grad)


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_batch(rng, n=8, d=16):
    return ContrastiveBatch(unit(rng.normal(size=(n, d))), unit(rng.normal(size=(n, d))))


def reference_loss(img, txt, scale):
    """Per-element softmax cross-entropy written out with explicit loops."""
    n = img.shape[0]
    logits = [[scale * float(np.dot(img[i], txt[j])) for j in range(n)] for i in range(n)]
    rows = cols = 0.0
    for i in range(n):
        rows += -logits[i][i] + math.log(sum(math.exp(v) for v in logits[i]))
        cols += -logits[i][i] + math.log(sum(math.exp(logits[k][i]) for k in range(n)))
    return 0.5 * (rows + cols) / n


@pytest.mark.parametrize("n", [2, 4, 64])
def test_identical_rows_give_log_n(n):
    row = unit(np.arange(1.0, 6.0)[None, :])
    batch = ContrastiveBatch(np.repeat(row, n, 0), np.repeat(row, n, 0))
    assert abs(infonce_loss(batch, math.log(1 / 0.07)) - math.log(n)) < 1e-5


def test_two_by_two_identity():
    batch = ContrastiveBatch(np.eye(2), np.eye(2))
    loss = infonce_loss(batch, 0.0)
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12
    assert abs(loss - 0.313262) < 1e-5


def test_saturated_aligned_pairs():
    batch = ContrastiveBatch(np.eye(4), np.eye(4))
    assert infonce_loss(batch, math.log(100.0)) < 1e-6


def test_matches_loop_reference(rng):
    for _ in range(5):
        b = random_batch(rng, n=6, d=5)
        assert abs(infonce_loss(b, 1.3) - reference_loss(b.image_emb, b.text_emb, math.exp(1.3))) < 1e-12


def test_clamp_at_100():
    b = ContrastiveBatch(np.eye(3), unit(np.eye(3) + 0.3))
    assert infonce_loss(b, 10.0) == infonce_loss(b, math.log(100.0))
    assert infonce_loss_and_grad(b, 10.0)[3] == 0.0


def test_batch_validation():
    with pytest.raises(ContrastiveError):
        ContrastiveBatch(np.eye(1), np.eye(1))
    with pytest.raises(ContrastiveError):
        ContrastiveBatch(2 * np.eye(2), np.eye(2))
    with pytest.raises(ContrastiveError):
        ContrastiveBatch(np.eye(2), np.eye(3))
    with pytest.raises(ContrastiveError):
        infonce_loss(ContrastiveBatch(np.eye(2), np.eye(2)), float("nan"))


def finite_difference(batch, lt, h=1e-5):
    img, txt = batch.image_emb, batch.text_emb

    def f(i, t, l):
        return infonce_loss(ContrastiveBatch(i, t, check_norms=False), l)

    d_img, d_txt = np.zeros_like(img), np.zeros_like(txt)
    for m, out, which in ((img, d_img, 0), (txt, d_txt, 1)):
        for idx in np.ndindex(m.shape):
            plus, minus = m.copy(), m.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = (plus, txt) if which == 0 else (img, plus)
            args_m = (minus, txt) if which == 0 else (img, minus)
            out[idx] = (f(*args_p, lt) - f(*args_m, lt)) / (2 * h)
    d_lt = (f(img, txt, lt + h) - f(img, txt, lt - h)) / (2 * h)
    return d_img, d_txt, d_lt


def max_rel_error(a, b, floor=1e-6):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_gradients_match_finite_differences(rng):
    for _ in range(3):
        batch = random_batch(rng)
        lt = float(rng.uniform(0.0, 3.0))
        _, gi, gt, gl = infonce_loss_and_grad(batch, lt)
        fi, ft, fl = finite_difference(batch, lt)
        assert max(max_rel_error(gi, fi), max_rel_error(gt, ft), max_rel_error(gl, fl)) < 1e-4


def test_uniform_batch_has_zero_temperature_gradient():
    row = unit(np.ones((1, 4)))
    batch = ContrastiveBatch(np.repeat(row, 5, 0), np.repeat(row, 5, 0))
    assert abs(infonce_loss_and_grad(batch, 2.0)[3]) < 1e-15


def test_softmax_ce_rows_sum_to_zero(rng):
    logits = rng.normal(size=(7, 7)) * 3
    np.testing.assert_allclose(softmax_ce_grad(logits).sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(softmax_ce_grad(logits.T).sum(axis=1), 0.0, atol=1e-15)


def test_permutation_and_role_symmetry(rng):
    b = random_batch(rng)
    perm = rng.permutation(8)
    permuted = ContrastiveBatch(b.image_emb[perm], b.text_emb[perm])
    assert abs(infonce_loss(b, 1.0) - infonce_loss(permuted, 1.0)) < 1e-12
    assert abs(infonce_loss(b, 1.0) - infonce_loss(b.transposed(), 1.0)) < 1e-12


def test_loss_decreases_as_positive_logit_grows(rng):
    # move text row 0 toward image row 0 along the component orthogonal to other images
    b = random_batch(rng, n=4, d=16)
    img, txt = b.image_emb, b.text_emb.copy()
    q, _ = np.linalg.qr(img[1:].T)
    direction = img[0] - q @ (q.T @ img[0])
    direction /= np.linalg.norm(direction)
    base = txt[0] - direction * (direction @ txt[0])
    prev = None
    for w in np.linspace(-0.5, 0.9, 8):
        t = txt.copy()
        t[0] = base + w * direction
        loss = infonce_loss(ContrastiveBatch(img, t, check_norms=False), 1.0)
        if prev is not None:
            assert loss < prev
        prev = loss
