"""Image container and compressed-sparse-row operators on vectorized images.

Images are vectorized in row-major (lexicographic) order, so pixel ``(i, j)``
of an ``height x width`` grid is entry ``i * width + j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import ContractError

__all__ = [
    "ImageGrid",
    "SparseOperator",
    "spmv",
    "spmv_transpose",
    "compose",
    "identity",
]


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """2D scalar field stored as a flat row-major float64 vector."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if v.size != self.width * self.height:
            raise ContractError(
                f"ImageGrid expects {self.width}x{self.height}={self.width * self.height} "
                f"values, got {v.size}"
            )
        if not np.all(np.isfinite(v)):
            raise ContractError("ImageGrid values must be finite")
        if v is self.values or v.base is self.values:
            v = v.copy()
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_array(cls, a) -> "ImageGrid":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ContractError(f"expected a 2D array, got shape {a.shape}")
        return cls(width=a.shape[1], height=a.shape[0], values=a.reshape(-1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.values.size

    def to_array(self) -> np.ndarray:
        """Read-only ``(height, width)`` view of the values."""
        return self.values.reshape(self.height, self.width)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Matrix in canonical CSR form.

    Canonical means column indices strictly increasing within each row and no
    stored zeros. Every constructor goes through :meth:`from_scipy`, which
    enforces it.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if ro.shape != (self.rows + 1,) or ro[0] != 0 or ro[-1] != ci.size or ci.size != w.size:
            raise ContractError("inconsistent CSR arrays")
        if np.any(np.diff(ro) < 0):
            raise ContractError("row offsets must be non-decreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise ContractError("column index out of range")
        if not np.all(np.isfinite(w)):
            raise ContractError("operator weights must be finite")
        if np.any(w == 0.0):
            raise ContractError("explicit zero weights are not allowed")
        # strictly increasing columns within each row
        if ci.size > 1:
            step = np.diff(ci)
            row_start = np.zeros(ci.size, dtype=bool)
            row_start[ro[1:-1][ro[1:-1] < ci.size]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ContractError("column indices must be strictly increasing within rows")
        for name, arr in (("row_offsets", ro), ("col_indices", ci), ("weights", w)):
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def from_scipy(cls, m) -> "SparseOperator":
        m = sparse.csr_matrix(m, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(
            rows=m.shape[0],
            cols=m.shape[1],
            row_offsets=m.indptr,
            col_indices=m.indices,
            weights=m.data,
        )

    @classmethod
    def from_triplets(cls, rows, cols, row_idx, col_idx, weights) -> "SparseOperator":
        """Build from coordinate triplets; duplicates are summed."""
        m = sparse.coo_matrix(
            (np.asarray(weights, dtype=np.float64), (np.asarray(row_idx), np.asarray(col_idx))),
            shape=(rows, cols),
        )
        return cls.from_scipy(m)

    @classmethod
    def from_dense(cls, a) -> "SparseOperator":
        return cls.from_scipy(sparse.csr_matrix(np.asarray(a, dtype=np.float64)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return self.weights.size

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """scipy CSR view sharing this operator's storage."""
        m = sparse.csr_matrix(
            (self.weights, self.col_indices, self.row_offsets), shape=self.shape
        )
        m.has_sorted_indices = True
        return m

    @cached_property
    def matrix_t(self) -> sparse.csr_matrix:
        """Transpose in CSR form, computed once and cached."""
        return self.matrix.T.tocsr()

    def transpose(self) -> "SparseOperator":
        return SparseOperator.from_scipy(self.matrix_t)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def identity(n: int) -> SparseOperator:
    return SparseOperator.from_scipy(sparse.identity(n, format="csr"))


def _vector(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.values
    return np.asarray(x, dtype=np.float64)


def spmv(op: SparseOperator, x) -> np.ndarray:
    """``y = op @ x``."""
    v = _vector(x)
    if v.ndim != 1 or v.size != op.cols:
        raise ContractError(f"spmv: operator has {op.cols} columns, vector has shape {v.shape}")
    return op.matrix @ v


def spmv_transpose(op: SparseOperator, y) -> np.ndarray:
    """``x = op.T @ y`` using the cached transpose."""
    v = _vector(y)
    if v.ndim != 1 or v.size != op.rows:
        raise ContractError(
            f"spmv_transpose: operator has {op.rows} rows, vector has shape {v.shape}"
        )
    return op.matrix_t @ v


def compose(a: SparseOperator, b: SparseOperator) -> SparseOperator:
    """Operator product ``a @ b`` (apply ``b`` first)."""
    if a.cols != b.rows:
        raise ContractError(f"compose: {a.shape} @ {b.shape} is not defined")
    return SparseOperator.from_scipy(a.matrix @ b.matrix)
