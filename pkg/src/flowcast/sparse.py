"""Compressed-sparse-row matrices sized for sensor graphs.

Kept deliberately small: construction from triples, dense round trips,
row normalization, transpose, and multiplication against dense arrays.
Column indices are sorted within each row and explicit zeros are dropped.
"""

from __future__ import annotations

import numpy as np


class CsrMatrix:
    __slots__ = ("rows", "cols", "indptr", "indices", "data", "_transpose", "_dense")

    def __init__(self, rows: int, cols: int, indptr, indices, data):
        self.rows = int(rows)
        self.cols = int(cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        self._transpose = None
        self._dense = None
        if self.indptr.shape != (self.rows + 1,):
            raise ValueError("indptr length must be rows+1")
        if self.indices.shape != self.data.shape:
            raise ValueError("indices and data must have equal length")

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def from_triples(cls, rows: int, cols: int, row_idx, col_idx, values) -> "CsrMatrix":
        """Build from coordinate triples; duplicates are summed, zeros dropped."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (row_idx.shape == col_idx.shape == values.shape):
            raise ValueError("triple arrays must have equal length")
        if row_idx.size:
            if row_idx.min() < 0 or row_idx.max() >= rows:
                raise ValueError("row index out of range")
            if col_idx.min() < 0 or col_idx.max() >= cols:
                raise ValueError("column index out of range")
        order = np.lexsort((col_idx, row_idx))
        row_idx, col_idx, values = row_idx[order], col_idx[order], values[order]
        if row_idx.size:
            # merge duplicate (row, col) entries
            first = np.ones(row_idx.size, dtype=bool)
            first[1:] = (row_idx[1:] != row_idx[:-1]) | (col_idx[1:] != col_idx[:-1])
            group = np.cumsum(first) - 1
            merged = np.zeros(int(group[-1]) + 1, dtype=np.float64)
            np.add.at(merged, group, values)
            row_idx, col_idx = row_idx[first], col_idx[first]
            keep = merged != 0.0
            row_idx, col_idx, merged = row_idx[keep], col_idx[keep], merged[keep]
        else:
            merged = values
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, row_idx + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(rows, cols, indptr, col_idx, merged)

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("expected a 2-d array")
        r, c = np.nonzero(a)
        return cls.from_triples(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    # ------------------------------------------------------------------
    # views and simple transforms
    # ------------------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        rows = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    def triples(self):
        """(row, col, value) arrays in row-major order."""
        rows = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.indptr))
        return rows, self.indices.copy(), self.data.copy()

    def transpose(self) -> "CsrMatrix":
        if self._transpose is None:
            r, c, v = self.triples()
            self._transpose = CsrMatrix.from_triples(self.cols, self.rows, c, r, v)
        return self._transpose

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.rows)
        np.add.at(out, np.repeat(np.arange(self.rows), np.diff(self.indptr)), self.data)
        return out

    def row_normalized(self) -> "CsrMatrix":
        """Divide each row by its sum; rows summing to zero stay all-zero."""
        sums = self.row_sums()
        scale = np.ones(self.rows)
        nonzero = sums != 0.0
        scale[nonzero] = 1.0 / sums[nonzero]
        expanded = np.repeat(scale, np.diff(self.indptr))
        return CsrMatrix(self.rows, self.cols, self.indptr, self.indices, self.data * expanded)

    def restrict(self, keep) -> "CsrMatrix":
        """Submatrix on the given node subset, rows and columns alike.

        `keep` is a sequence of old indices; position in it becomes the new index.
        """
        keep = np.asarray(keep, dtype=np.int64)
        remap = -np.ones(max(self.rows, self.cols), dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        r, c, v = self.triples()
        mask = (remap[r] >= 0) & (remap[c] >= 0)
        return CsrMatrix.from_triples(keep.size, keep.size, remap[r[mask]], remap[c[mask]], v[mask])

    # ------------------------------------------------------------------
    # products
    # ------------------------------------------------------------------

    def matmul(self, x: np.ndarray) -> np.ndarray:
        """Sparse @ dense. Accepts [cols, c] or batched [b, cols, c].

        Small or dense matrices dispatch to a cached dense BLAS product;
        genuinely sparse ones use the gather/segment-sum kernel.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            if x.shape[1] != self.cols:
                raise ValueError(f"shape mismatch: {self.rows}x{self.cols} @ {x.shape}")
            b, n, c = x.shape
            flat = x.transpose(1, 0, 2).reshape(n, b * c)
            out = self._matmul2(flat)
            return out.reshape(self.rows, b, c).transpose(1, 0, 2)
        if x.ndim == 2:
            return self._matmul2(x)
        raise ValueError("expected a 2-d or 3-d dense operand")

    def _use_dense_kernel(self) -> bool:
        cells = self.rows * self.cols
        return cells <= 4096 or (cells > 0 and self.nnz / cells >= 0.15)

    def _matmul2(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.cols:
            raise ValueError(f"shape mismatch: {self.rows}x{self.cols} @ {x.shape}")
        if self._use_dense_kernel():
            if self._dense is None:
                self._dense = self.to_dense()
            return self._dense @ x
        out = np.zeros((self.rows, x.shape[1]))
        if self.nnz == 0:
            return out
        contrib = self.data[:, None] * x[self.indices]
        counts = np.diff(self.indptr)
        nz_rows = np.flatnonzero(counts > 0)
        # reduceat over strictly increasing starts; empty rows handled by the mask
        sums = np.add.reduceat(contrib, self.indptr[nz_rows], axis=0)
        out[nz_rows] = sums
        return out
