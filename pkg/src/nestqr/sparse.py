"""Compressed sparse column storage, block gather/scatter, Matrix Market I/O.

The factorization works on small dense blocks extracted from a CSC matrix by
index sets (`gather_block`) and written back (`scatter_block`); column-major
storage matches the column-block access pattern of the Householder panels.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, NestqrError


class SparseMat:
    """Sparse matrix in compressed sparse column form.

    Fields
    ------
    nrows, ncols : int
    indptr : (ncols+1,) int64 column pointers
    indices : (nnz,) int64 row indices, strictly increasing within a column
    data : (nnz,) float64 values

    Invariants: row indices strictly increasing per column; no explicit
    zeros after `compress()`.
    """

    __slots__ = ("nrows", "ncols", "indptr", "indices", "data")

    def __init__(self, nrows, ncols, indptr, indices, data):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)

    # ------------------------------------------------------------------ build
    @classmethod
    def from_triplets(cls, nrows, ncols, rows, cols, vals):
        """Build from COO triplets; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size:
            if rows.min() < 0 or rows.max() >= nrows:
                raise NestqrError("row index out of range in triplet list")
            if cols.min() < 0 or cols.max() >= ncols:
                raise NestqrError("column index out of range in triplet list")
        # Sort by (col, row), then sum runs of equal (col, row).
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new_run = np.empty(rows.size, dtype=bool)
            new_run[0] = True
            new_run[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            run_id = np.cumsum(new_run) - 1
            vals = np.bincount(run_id, weights=vals)
            rows = rows[new_run]
            cols = cols[new_run]
        indptr = np.zeros(ncols + 1, dtype=np.int64)
        np.add.at(indptr, cols + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(nrows, ncols, indptr, rows, vals)

    @classmethod
    def from_dense(cls, D):
        D = np.asarray(D, dtype=np.float64)
        rows, cols = np.nonzero(D)
        return cls.from_triplets(D.shape[0], D.shape[1], rows, cols, D[rows, cols])

    @classmethod
    def identity(cls, n):
        ar = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), ar, np.ones(n))

    # ------------------------------------------------------------- properties
    @property
    def nnz(self):
        return int(self.indptr[-1])

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def copy(self):
        return SparseMat(self.nrows, self.ncols, self.indptr.copy(),
                         self.indices.copy(), self.data.copy())

    # ------------------------------------------------------------ conversion
    def to_dense(self):
        D = np.zeros((self.nrows, self.ncols))
        for j in range(self.ncols):
            lo, hi = self.indptr[j], self.indptr[j + 1]
            D[self.indices[lo:hi], j] = self.data[lo:hi]
        return D

    def to_scipy(self):
        from scipy.sparse import csc_matrix

        return csc_matrix((self.data, self.indices, self.indptr),
                          shape=(self.nrows, self.ncols))

    def to_triplets(self):
        cols = np.repeat(np.arange(self.ncols, dtype=np.int64),
                         np.diff(self.indptr))
        return self.indices.copy(), cols, self.data.copy()

    # ------------------------------------------------------------- operations
    def matvec(self, x):
        """A @ x for a vector or (ncols, k) matrix."""
        x = np.asarray(x, dtype=np.float64)
        return self.to_scipy() @ x

    def __matmul__(self, x):
        return self.matvec(x)

    def compress(self, drop_tol=0.0):
        """Remove stored entries with |value| <= drop_tol (in place)."""
        keep = np.abs(self.data) > drop_tol
        if keep.all():
            return self
        counts = np.diff(self.indptr)
        col_of = np.repeat(np.arange(self.ncols, dtype=np.int64), counts)
        self.indices = self.indices[keep]
        self.data = self.data[keep]
        new_counts = np.bincount(col_of[keep], minlength=self.ncols)
        self.indptr = np.concatenate(([0], np.cumsum(new_counts))).astype(np.int64)
        return self

    def column_norms(self):
        """2-norm of every column."""
        sq = np.zeros(self.ncols)
        if self.nnz:
            counts = np.diff(self.indptr)
            col_of = np.repeat(np.arange(self.ncols, dtype=np.int64), counts)
            np.add.at(sq, col_of, self.data ** 2)
        return np.sqrt(sq)


# ---------------------------------------------------------------------- ops
def equilibrate_columns(A):
    """Rescale every column of A to unit 2-norm.

    Returns
    -------
    (SparseMat, ndarray)
        The rescaled matrix and the per-column scale vector d, where
        the returned matrix equals A @ diag(1/d). A solution y of the
        rescaled system maps back as x = y / d.

    Raises
    ------
    NestqrError
        If some column is structurally/numerically zero (the matrix
        cannot be full rank).
    """
    norms = A.column_norms()
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise NestqrError(f"cannot equilibrate: column {int(zero[0])} has zero norm")
    out = A.copy()
    counts = np.diff(out.indptr)
    col_of = np.repeat(np.arange(out.ncols, dtype=np.int64), counts)
    out.data = out.data / norms[col_of]
    return out, norms


def gather_block(A, rows, cols):
    """Extract the dense |rows| x |cols| block A[rows, cols] in index-set order.

    Entries absent from the sparse structure are 0.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _check_range(rows, A.nrows, "row")
    _check_range(cols, A.ncols, "column")
    out = np.zeros((rows.size, cols.size))
    if rows.size == 0 or cols.size == 0:
        return out
    pos = np.full(A.nrows, -1, dtype=np.int64)
    pos[rows] = np.arange(rows.size)
    for j, c in enumerate(cols):
        lo, hi = A.indptr[c], A.indptr[c + 1]
        p = pos[A.indices[lo:hi]]
        m = p >= 0
        out[p[m], j] = A.data[lo:hi][m]
    return out


def scatter_block(A, rows, cols, block, drop_tol=0.0):
    """Write the dense block into A[rows, cols] in place (structural update).

    Entries of `block` with |value| <= drop_tol are not stored; existing
    entries inside the (rows, cols) rectangle are replaced (or removed).
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _check_range(rows, A.nrows, "row")
    _check_range(cols, A.ncols, "column")
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (rows.size, cols.size):
        raise NestqrError(f"block shape {block.shape} != ({rows.size}, {cols.size})")

    in_rows = np.zeros(A.nrows, dtype=bool)
    in_rows[rows] = True
    in_cols = np.zeros(A.ncols, dtype=bool)
    in_cols[cols] = True

    # Keep every old entry outside the (rows x cols) rectangle.
    counts = np.diff(A.indptr)
    col_of = np.repeat(np.arange(A.ncols, dtype=np.int64), counts)
    keep = ~(in_rows[A.indices] & in_cols[col_of])

    # New entries from the block, above the drop tolerance.
    bi, bj = np.nonzero(np.abs(block) > drop_tol)
    new_rows = rows[bi]
    new_cols = cols[bj]
    new_vals = block[bi, bj]

    all_rows = np.concatenate((A.indices[keep], new_rows))
    all_cols = np.concatenate((col_of[keep], new_cols))
    all_vals = np.concatenate((A.data[keep], new_vals))
    order = np.lexsort((all_rows, all_cols))
    A.indices = all_rows[order]
    A.data = all_vals[order]
    new_counts = np.bincount(all_cols, minlength=A.ncols)
    A.indptr = np.concatenate(([0], np.cumsum(new_counts))).astype(np.int64)


def _check_range(idx, n, what):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise NestqrError(f"{what} index out of range (n={n})")


# ------------------------------------------------------------- Matrix Market
def read_matrix_market(path):
    """Read a Matrix Market coordinate file (real/integer, general).

    Duplicate entries are summed; 1-based indices become 0-based.

    Raises
    ------
    FormatError
        With a line number on parse failures; complex/pattern fields and
        non-general symmetries are rejected as unsupported.
    """
    with open(path, "r") as fh:
        header = fh.readline()
        if not header.lower().startswith("%%matrixmarket"):
            raise FormatError("missing MatrixMarket header banner", line=1)
        parts = header.strip().split()
        if len(parts) < 5:
            raise FormatError("incomplete MatrixMarket header", line=1)
        obj, fmt, field, symmetry = (p.lower() for p in parts[1:5])
        if obj != "matrix" or fmt != "coordinate":
            raise FormatError(f"unsupported format: {obj} {fmt}", line=1)
        if field in ("complex", "pattern"):
            raise FormatError(f"unsupported field type: {field}", line=1)
        if field not in ("real", "integer"):
            raise FormatError(f"unknown field type: {field}", line=1)
        if symmetry != "general":
            raise FormatError(f"unsupported symmetry: {symmetry}", line=1)

        lineno = 1
        size_line = None
        for raw in fh:
            lineno += 1
            s = raw.strip()
            if not s or s.startswith("%"):
                continue
            size_line = s
            break
        if size_line is None:
            raise FormatError("missing size line", line=lineno)
        try:
            nrows, ncols, nnz = (int(t) for t in size_line.split())
        except ValueError:
            raise FormatError(f"bad size line: {size_line!r}", line=lineno)

        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for raw in fh:
            lineno += 1
            s = raw.strip()
            if not s or s.startswith("%"):
                continue
            toks = s.split()
            if len(toks) != 3:
                raise FormatError(f"expected 'i j value', got {s!r}", line=lineno)
            try:
                i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
            except ValueError:
                raise FormatError(f"bad entry: {s!r}", line=lineno)
            if k >= nnz:
                raise FormatError("more entries than the size line declared", line=lineno)
            if not (1 <= i <= nrows and 1 <= j <= ncols):
                raise FormatError(f"index ({i}, {j}) out of bounds", line=lineno)
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise FormatError(f"size line declared {nnz} entries, found {k}", line=lineno)
    return SparseMat.from_triplets(nrows, ncols, rows, cols, vals)


def write_matrix_market(A, path, comment=""):
    """Write in coordinate real general format at 17 significant digits."""
    rows, cols, vals = A.to_triplets()
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        for line in comment.splitlines():
            fh.write(f"%{line}\n")
        fh.write(f"{A.nrows} {A.ncols} {A.nnz}\n")
        for i, j, v in zip(rows, cols, vals):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


def to_triplet_csv(A, path):
    """Debug export: one 'row,col,value' line per stored entry."""
    rows, cols, vals = A.to_triplets()
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for i, j, v in zip(rows, cols, vals):
            fh.write(f"{i},{j},{v:.17g}\n")
