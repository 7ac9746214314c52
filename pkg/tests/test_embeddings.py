import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clipart.embeddings import (EmbeddingError, EmbeddingMatrix, cosine_similarity,
                                ids_path, l2_normalize, read_emb, write_emb)


def mat(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float32)
    return EmbeddingMatrix(tuple(ids or [f"r{i}" for i in range(len(rows))]), rows)


def test_normalize_345():
    out = l2_normalize(mat([[3, 4]]))
    np.testing.assert_allclose(out.rows, [[0.6, 0.8]], atol=1e-7)
    assert out.ids == ("r0",)


def test_normalize_unit_row_unchanged():
    out = l2_normalize(mat([[1, 0, 0]]))
    assert np.array_equal(out.rows, np.array([[1, 0, 0]], dtype=np.float32))


def test_normalize_zero_row_names_id():
    with pytest.raises(EmbeddingError, match="zz"):
        l2_normalize(mat([[1, 1], [0, 0]], ids=["a", "zz"]))


finite_rows = arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                     elements=st.floats(-100, 100, width=32).filter(lambda v: abs(v) > 1e-3))


@given(finite_rows)
@settings(max_examples=60, deadline=None)
def test_normalize_unit_norm_and_idempotent(rows):
    once = l2_normalize(mat(rows))
    np.testing.assert_allclose(np.linalg.norm(once.rows.astype(np.float64), axis=1), 1.0, atol=1e-6)
    twice = l2_normalize(once)
    assert np.max(np.abs(twice.rows - once.rows)) <= 1e-6


def test_cosine_identity_and_antipodal():
    eye = mat(np.eye(3))
    assert np.array_equal(cosine_similarity(eye, eye), np.eye(3))
    assert cosine_similarity(mat([[1, 0]]), mat([[-1, 0]]))[0, 0] == -1.0


def test_cosine_self_similarity(rng):
    a = l2_normalize(mat(rng.normal(size=(5, 7))))
    np.testing.assert_allclose(np.diag(cosine_similarity(a, a)), 1.0, atol=1e-6)


def test_cosine_errors():
    with pytest.raises(EmbeddingError, match="dim mismatch"):
        cosine_similarity(mat([[1, 0]]), mat([[1, 0, 0]]))
    with pytest.raises(EmbeddingError, match="not L2-normalized"):
        cosine_similarity(mat([[2, 0]]), mat([[1, 0]]))


def test_cosine_transpose_and_bounds(rng):
    a = l2_normalize(mat(rng.normal(size=(9, 12))))
    b = l2_normalize(mat(rng.normal(size=(4, 12))))
    s = cosine_similarity(a, b)
    assert np.array_equal(s, cosine_similarity(b, a).T)
    assert np.all(np.abs(s) <= 1 + 1e-5)


def test_cosine_chunked_rows_match_bitwise(rng):
    a = l2_normalize(mat(rng.normal(size=(30, 16))))
    b = l2_normalize(mat(rng.normal(size=(20, 16))))
    whole = cosine_similarity(a, b)
    parts = np.vstack([cosine_similarity(a.rows[i:i + 7], b) for i in range(0, 30, 7)])
    assert np.array_equal(whole, parts)


def test_roundtrip_bit_exact(tmp_path, rng):
    m = mat(rng.normal(size=(2, 3)).astype(np.float32), ids=["x", "üñí"])
    path = tmp_path / "m.emb"
    write_emb(m, path)
    back = read_emb(path)
    assert back.ids == m.ids
    assert back.rows.tobytes() == m.rows.tobytes()
    assert ids_path(path).read_text(encoding="utf-8") == "x\nüñí\n"


def test_header_layout(tmp_path):
    path = tmp_path / "h.emb"
    write_emb(mat([[1.0, 2.0, 3.0]]), path)
    data = path.read_bytes()
    assert data[:4] == b"EMB1"
    assert data[4:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(data[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    write_emb(mat([[1, 2]]), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(EmbeddingError, match="bad magic"):
        read_emb(path)


def test_truncated(tmp_path):
    path = tmp_path / "t.emb"
    write_emb(mat([[1, 2], [3, 4]]), path)
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(EmbeddingError, match="truncated"):
        read_emb(path)


def test_count_mismatch(tmp_path):
    path = tmp_path / "c.emb"
    write_emb(mat([[1, 2], [3, 4]]), path)
    ids_path(path).write_text("a\nb\nc\n", encoding="utf-8")
    with pytest.raises(EmbeddingError, match="count mismatch"):
        read_emb(path)


def test_matrix_invariants():
    with pytest.raises(EmbeddingError, match="unique"):
        mat([[1], [2]], ids=["a", "a"])
    with pytest.raises(EmbeddingError, match="non-finite"):
        mat([[np.nan]])
    m = mat([[1, 2]])
    with pytest.raises(ValueError):
        m.rows[0, 0] = 5
