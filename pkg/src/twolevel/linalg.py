"""Dense/sparse kernels and third-order tensor reshapes used by the solvers.

Conventions
-----------
Vectors are 1-D float64 ndarrays. A third-order tensor is a plain ndarray of
shape ``(I1, I2, I3)``; unfoldings follow the column-major fiber convention,
so ``mode_unfold(T, 1)[i, j + k*I2] == T[i, j, k]``. Unfolding and folding
each make at most one copy.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def _as_vector(x, n=None, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ShapeError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


class SparseMatrix:
    """Sparse matrix stored as canonical sorted (row, col, value) triplets.

    Triplets are sorted by (row, col), duplicates are rejected and explicit
    zeros dropped, so equal matrices have identical storage. Products use a
    fixed accumulation order, which keeps solver traces reproducible
    bit-for-bit.
    """

    def __init__(self, rows: int, cols: int, row_idx, col_idx, values):
        self.rows = int(rows)
        self.cols = int(cols)
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (row_idx.shape == col_idx.shape == values.shape) or row_idx.ndim != 1:
            raise ShapeError("triplet arrays must be 1-D and equally sized")
        if values.size and not np.all(np.isfinite(values)):
            raise ShapeError("non-finite value in sparse triplets")
        if row_idx.size:
            if row_idx.min() < 0 or row_idx.max() >= self.rows:
                raise ShapeError("row index out of range")
            if col_idx.min() < 0 or col_idx.max() >= self.cols:
                raise ShapeError("column index out of range")
        keep = values != 0.0
        row_idx, col_idx, values = row_idx[keep], col_idx[keep], values[keep]
        order = np.lexsort((col_idx, row_idx))
        self.row = row_idx[order]
        self.col = col_idx[order]
        self.data = values[order]
        key = self.row * self.cols + self.col
        if key.size and np.any(np.diff(key) == 0):
            raise ShapeError("duplicate (row, col) pair in sparse triplets")

    @classmethod
    def from_triplets(cls, rows, cols, triplets):
        """Build from an iterable of (row, col, value)."""
        if len(triplets) == 0:
            return cls(rows, cols, [], [], [])
        arr = np.asarray(triplets, dtype=np.float64).reshape(-1, 3)
        return cls(rows, cols, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, n, idx, idx, np.ones(n))

    @property
    def nnz(self) -> int:
        return self.data.size

    @property
    def shape(self):
        return (self.rows, self.cols)

    def to_dense(self):
        out = np.zeros((self.rows, self.cols))
        out[self.row, self.col] = self.data
        return out

    def matvec(self, x):
        x = _as_vector(x, self.cols)
        out = np.zeros(self.rows)
        np.add.at(out, self.row, self.data * x[self.col])
        return out

    def rmatvec(self, y):
        y = _as_vector(y, self.rows, name="y")
        out = np.zeros(self.cols)
        np.add.at(out, self.col, self.data * y[self.row])
        return out

    def col_sqnorms(self):
        """Diagonal of the Gram matrix A^T A."""
        out = np.zeros(self.cols)
        np.add.at(out, self.col, self.data**2)
        return out

    def scale(self, s: float) -> "SparseMatrix":
        return SparseMatrix(self.rows, self.cols, self.row, self.col, self.data * s)

    def __matmul__(self, x):
        return self.matvec(x)

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def spmv(A: SparseMatrix, x, transpose: bool = False):
    """Sparse matrix-vector product ``A x`` (or ``A^T x``)."""
    return A.rmatvec(x) if transpose else A.matvec(x)


def khatri_rao(A, B):
    """Column-wise Kronecker product; column r is kron(A[:, r], B[:, r])."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise ShapeError("khatri_rao expects matrices")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    ia, r = A.shape
    ib = B.shape[0]
    return (A[:, None, :] * B[None, :, :]).reshape(ia * ib, r)


def hadamard(A, B):
    """Element-wise product of two equally shaped matrices."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A * B


def mode_unfold(T, mode: int):
    """Matricize a 3-way tensor along ``mode`` in {1, 2, 3}."""
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 3:
        raise ShapeError(f"expected a 3-way tensor, got ndim={T.ndim}")
    i1, i2, i3 = T.shape
    if mode == 1:
        return T.reshape(i1, i2 * i3, order="F")
    if mode == 2:
        return np.moveaxis(T, 1, 0).reshape(i2, i1 * i3, order="F")
    if mode == 3:
        return np.moveaxis(T, 2, 0).reshape(i3, i1 * i2, order="F")
    raise ShapeError(f"mode must be 1, 2 or 3, got {mode}")


def mode_fold(M, dims, mode: int):
    """Inverse of :func:`mode_unfold`; exact round-trip for every mode."""
    M = np.asarray(M, dtype=np.float64)
    i1, i2, i3 = dims
    expected = {1: (i1, i2 * i3), 2: (i2, i1 * i3), 3: (i3, i1 * i2)}
    if mode not in expected:
        raise ShapeError(f"mode must be 1, 2 or 3, got {mode}")
    if M.shape != expected[mode]:
        raise ShapeError(f"matrix shape {M.shape} incompatible with dims {dims} mode {mode}")
    if mode == 1:
        return M.reshape(i1, i2, i3, order="F")
    if mode == 2:
        return np.moveaxis(M.reshape(i2, i1, i3, order="F"), 0, 1)
    return np.moveaxis(M.reshape(i3, i1, i2, order="F"), 0, 2)


def soft_shrink(x, kappa: float):
    """Soft shrinkage, the proximal map of ``kappa * ||.||_1``."""
    if kappa < 0:
        raise ConfigError(f"shrinkage threshold must be nonnegative, got {kappa}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)
