"""Dense/sparse linear algebra kernels and seeded random streams.

Dense matrices and vectors are plain float32 numpy arrays. The sparse format is
compressed-sparse-column, because activity sparsity gates whole columns of a
weight matrix: a silent input neuron means its column is never read.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def as_matrix(data, rows=None, cols=None) -> np.ndarray:
    """Return a finite, C-contiguous float32 matrix."""
    m = np.ascontiguousarray(data, dtype=DTYPE)
    if rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(data) -> np.ndarray:
    v = np.ascontiguousarray(data, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def dense_matvec(W: np.ndarray, a: np.ndarray) -> np.ndarray:
    if W.ndim != 2 or a.ndim != 1 or W.shape[1] != a.shape[0]:
        raise ShapeError(f"cannot multiply {W.shape} by {a.shape}")
    out = W.astype(np.float64) @ a.astype(np.float64)
    return out.astype(W.dtype)


@dataclass(frozen=True)
class CscMatrix:
    rows: int
    cols: int
    col_ptr: np.ndarray  # int64, len cols + 1
    row_idx: np.ndarray  # int32, sorted within each column
    values: np.ndarray   # float32, never zero

    def __post_init__(self):
        if len(self.col_ptr) != self.cols + 1 or self.col_ptr[0] != 0:
            raise ShapeError("bad col_ptr")
        if self.col_ptr[-1] != len(self.values) or len(self.values) != len(self.row_idx):
            raise ShapeError("col_ptr does not match stored entries")
        if np.any(np.diff(self.col_ptr) < 0):
            raise ShapeError("col_ptr must be nondecreasing")

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])

    @property
    def shape(self):
        return (self.rows, self.cols)

    def col_nnz(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        cols = np.repeat(np.arange(self.cols), self.col_nnz())
        out[self.row_idx, cols] = self.values
        return out

    def column_block(self, start: int, stop: int) -> "CscMatrix":
        """Columns ``start:stop`` as their own matrix (shares no state)."""
        lo, hi = self.col_ptr[start], self.col_ptr[stop]
        return CscMatrix(
            self.rows,
            stop - start,
            (self.col_ptr[start:stop + 1] - lo).copy(),
            self.row_idx[lo:hi].copy(),
            self.values[lo:hi].copy(),
        )


def csc_from_dense(W: np.ndarray, mask: np.ndarray | None = None) -> CscMatrix:
    """Build a CSC matrix keeping entries where ``mask`` is set and the value is nonzero."""
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {W.shape}")
    keep = W != 0
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != W.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match weights {W.shape}")
        keep &= mask.astype(bool)
    # column-major traversal gives row indices sorted within each column
    cols, rows = np.nonzero(keep.T)
    col_ptr = np.zeros(W.shape[1] + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=W.shape[1]), out=col_ptr[1:])
    return CscMatrix(
        W.shape[0],
        W.shape[1],
        col_ptr,
        rows.astype(np.int32),
        np.ascontiguousarray(W[rows, cols], dtype=DTYPE),
    )


def csc_matvec_active(W: CscMatrix, a: np.ndarray, active) -> tuple[np.ndarray, int]:
    """Multiply by ``a`` reading only the columns listed in ``active``.

    ``active`` must list the nonzero positions of ``a``. Returns the product and
    the number of multiply-accumulates performed, i.e. the stored entries of the
    touched columns.
    """
    active = np.asarray(active, dtype=np.int64)
    if a.shape != (W.cols,):
        raise ShapeError(f"vector of length {a.shape} for matrix with {W.cols} columns")
    if active.size and (active.min() < 0 or active.max() >= W.cols):
        raise IndexError("active column index out of range")
    if active.size == 0:
        return np.zeros(W.rows, dtype=a.dtype), 0
    starts = W.col_ptr[active]
    counts = W.col_ptr[active + 1] - starts
    macs = int(counts.sum())
    if macs == 0:
        return np.zeros(W.rows, dtype=a.dtype), 0
    # flat positions of every stored entry in the active columns
    offsets = np.repeat(starts - np.cumsum(counts) + counts, counts)
    pos = offsets + np.arange(macs)
    contrib = W.values[pos].astype(np.float64) * np.repeat(a[active].astype(np.float64), counts)
    out = np.bincount(W.row_idx[pos], weights=contrib, minlength=W.rows)
    return out.astype(a.dtype), macs


class Rng:
    """Seeded counter-based generator with labeled, independent substreams.

    ``Rng(7).child("init")`` always yields the same stream, and adding a new
    consumer under a different label never shifts any existing one.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(label.encode("utf-8")),))

    def uniform(self, low, high, size) -> np.ndarray:
        return self.gen.uniform(low, high, size).astype(DTYPE)

    def normal(self, scale, size) -> np.ndarray:
        return (self.gen.standard_normal(size) * scale).astype(DTYPE)

    def bernoulli(self, p_keep, size) -> np.ndarray:
        return self.gen.random(size) < p_keep

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size)

    def bytes(self, n: int) -> bytes:
        return self.gen.bytes(n)
