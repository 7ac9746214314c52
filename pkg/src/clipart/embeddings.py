"""Dense embedding matrices, normalization, cosine similarity and the EMB1 file format.

File layout (little-endian)::

    b"EMB1" | u32 version (=1) | u32 rows | u32 dim | rows*dim float32, row-major

Ids live in a sibling text file ``<path>.ids.txt`` with one UTF-8 id per line.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

NORM_FLOOR = 1e-12
NORMALIZED_TOL = 1e-4
DEFAULT_DIM = 512

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class EmbeddingError(ValueError):
    """Invalid embedding data or a malformed embedding file."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Id-aligned float32 matrix. Immutable once constructed."""

    ids: tuple[str, ...]
    rows: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.ids)
        rows = np.array(self.rows, dtype=np.float32, copy=True)
        if rows.ndim != 2:
            raise EmbeddingError(f"rows must be 2-D, got shape {rows.shape}")
        if rows.shape[1] < 1:
            raise EmbeddingError("dim must be positive")
        if len(ids) != rows.shape[0]:
            raise EmbeddingError(
                f"count mismatch: {len(ids)} ids for {rows.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise EmbeddingError("ids must be unique")
        if not np.all(np.isfinite(rows)):
            raise EmbeddingError("embedding contains non-finite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> EmbeddingMatrix:
        index = {k: i for i, k in enumerate(self.ids)}
        try:
            picks = [index[k] for k in ids]
        except KeyError as exc:
            raise EmbeddingError(f"unknown id {exc.args[0]!r}") from None
        return EmbeddingMatrix(tuple(ids), self.rows[picks])


def normalize_rows(x: np.ndarray, ids: Sequence[str] | None = None) -> np.ndarray:
    """Divide each row by its Euclidean norm; rows below NORM_FLOOR are an error."""
    x = np.asarray(x)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.reshape(-1) < NORM_FLOOR)
    if bad.size:
        name = ids[bad[0]] if ids is not None else f"#{bad[0]}"
        raise EmbeddingError(f"row {name} has near-zero norm; cannot normalize")
    return x / norms


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    rows = normalize_rows(m.rows.astype(np.float64), m.ids)
    return EmbeddingMatrix(m.ids, rows.astype(np.float32))


def check_normalized(x: np.ndarray, what: str = "input") -> None:
    norms = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > NORMALIZED_TOL:
        raise EmbeddingError(f"{what} rows are not L2-normalized")


def _as_rows(m: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    rows = m.rows if isinstance(m, EmbeddingMatrix) else np.asarray(m)
    return np.atleast_2d(rows)


def cosine_similarity(a: EmbeddingMatrix | np.ndarray,
                      b: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Pairwise dot products of two row-normalized matrices, in float64.

    Each output row is an independent matrix-vector product, so splitting
    queries into chunks gives the same bits as one call.
    """
    ra, rb = _as_rows(a), _as_rows(b)
    if ra.shape[1] != rb.shape[1]:
        raise EmbeddingError(f"dim mismatch: {ra.shape[1]} vs {rb.shape[1]}")
    check_normalized(ra, "left")
    check_normalized(rb, "right")
    rb64 = rb.astype(np.float64)
    return np.stack([rb64 @ row for row in ra.astype(np.float64)]) if len(ra) else \
        np.zeros((0, len(rb)))


def ids_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids.txt")


def write_emb(m: EmbeddingMatrix, path: str | os.PathLike) -> None:
    for i in m.ids:
        if "\n" in i or "\r" in i:
            raise EmbeddingError(f"id {i!r} contains a line break")
    path = Path(path)
    n, dim = m.rows.shape
    payload = _HEADER.pack(MAGIC, VERSION, n, dim) + m.rows.astype("<f4").tobytes()
    path.write_bytes(payload)
    ids_path(path).write_text("".join(f"{i}\n" for i in m.ids), encoding="utf-8")


def read_emb(path: str | os.PathLike) -> EmbeddingMatrix:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise EmbeddingError(f"{path}: bad magic")
    if len(data) < _HEADER.size:
        raise EmbeddingError(f"{path}: truncated header")
    _, version, n, dim = _HEADER.unpack_from(data)
    if version != VERSION:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * dim
    if len(data) < expected:
        raise EmbeddingError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise EmbeddingError(f"{path}: {len(data) - expected} trailing bytes")
    rows = np.frombuffer(data, dtype="<f4", count=n * dim, offset=_HEADER.size)
    ids = ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != n:
        raise EmbeddingError(f"{path}: count mismatch ({len(ids)} ids, {n} rows)")
    return EmbeddingMatrix(tuple(ids), rows.reshape(n, dim).astype(np.float32))
