"""Sparse matrix storage helpers, Matrix Market I/O and the A^T A pattern graph.

Matrices are ``scipy.sparse.csc_matrix`` objects kept in canonical form:
sorted row indices, no duplicates, no explicit zeros.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MatrixMarketError",
    "ColumnScaling",
    "canonicalize",
    "read_matrix_market",
    "write_matrix_market",
    "scale_columns",
    "spmv",
    "spmv_t",
    "ata_graph",
]


class MatrixMarketError(ValueError):
    """Malformed Matrix Market input; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def canonicalize(A) -> sp.csc_matrix:
    """Return a canonical CSC copy of ``A`` (float64, sorted, summed, no zeros)."""
    A = sp.csc_matrix(A, dtype=np.float64, copy=True)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def read_matrix_market(path) -> sp.csc_matrix:
    """Read a real ``coordinate`` Matrix Market file (general or symmetric)."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket header", 1)
    obj, fmt, field, symm = (h.lower() for h in head[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"unsupported object/format {obj} {fmt}", 1)
    if field not in ("real", "double", "integer"):
        raise MatrixMarketError(f"unsupported field {field!r} (real required)", 1)
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry {symm!r}", 1)

    i = 1
    while i < len(lines) and (not lines[i].strip() or lines[i].lstrip().startswith("%")):
        i += 1
    if i == len(lines):
        raise MatrixMarketError("missing size line", i + 1)
    try:
        m, n, nnz = (int(t) for t in lines[i].split())
    except ValueError:
        raise MatrixMarketError("bad size line", i + 1) from None
    size_line = i

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.float64)
    k = 0
    for j in range(size_line + 1, len(lines)):
        text = lines[j].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MatrixMarketError("expected 'row col value'", j + 1)
        if k == nnz:
            raise MatrixMarketError("more entries than declared", j + 1)
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError("unparsable entry", j + 1) from None
        if not (1 <= r <= m and 1 <= c <= n):
            raise MatrixMarketError(f"index ({r}, {c}) out of bounds for {m}x{n}", j + 1)
        rows[k], cols[k], vals[k] = r - 1, c - 1, v
        k += 1
    if k != nnz:
        raise MatrixMarketError(f"declared {nnz} entries, found {k}", len(lines))

    if symm == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return canonicalize(sp.coo_matrix((vals, (rows, cols)), shape=(m, n)))


def write_matrix_market(A, path, comment=None) -> None:
    """Write ``A`` as a real general coordinate file with round-trip exact values."""
    A = canonicalize(A).tocoo()
    m, n = A.shape
    order = np.lexsort((A.row, A.col))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{m} {n} {A.nnz}\n")
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")
        fh.flush()
        os.fsync(fh.fileno())


@dataclass(frozen=True)
class ColumnScaling:
    """Per-column scale factors ``d`` (the original column norms)."""

    d: np.ndarray

    def scale(self, x):
        """Map a solution of the scaled problem back: ``x = x' / d``."""
        return np.asarray(x) / self.d

    def unscale(self, x):
        return np.asarray(x) * self.d


def scale_columns(A):
    """Scale every column of ``A`` to unit 2-norm.

    Returns ``(A_scaled, ColumnScaling)``; raises ``ValueError`` naming the
    first zero column.
    """
    A = canonicalize(A)
    d = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    zero = np.nonzero(d == 0)[0]
    if len(zero):
        raise ValueError(f"column {zero[0]} is zero")
    # norms of the scaled columns are 1 up to a few ulps
    As = A @ sp.diags(1.0 / d)
    return canonicalize(As), ColumnScaling(d)


def spmv(A, x):
    x = np.asarray(x, dtype=float)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, x has length {x.shape[0]}")
    return A @ x


def spmv_t(A, y):
    y = np.asarray(y, dtype=float)
    if y.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, y has length {y.shape[0]}")
    return A.T @ y


def ata_graph(A) -> sp.csr_matrix:
    """Adjacency of the column graph of ``A^T A`` (pattern only, no self loops).

    Edge ``{i, j}`` exists iff some row of ``A`` is nonzero in both columns.
    """
    P = sp.csr_matrix(A, copy=True)
    P.eliminate_zeros()
    P.data = np.ones_like(P.data, dtype=np.int64)
    G = (P.T @ P).tocsr()
    G.setdiag(0)
    G.eliminate_zeros()
    G.data[:] = 1
    G.sort_indices()
    return G
