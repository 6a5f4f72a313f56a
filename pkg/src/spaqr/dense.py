"""Dense micro-kernels used on the fronts of the factorization.

Householder vectors are kept in LAPACK's packed layout (unit lower
trapezoid of ``h`` plus ``tau``) so every reflector set, whether produced by
LAPACK or by the pure numpy pivoted QR below, is applied through ``dormqr``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

__all__ = [
    "NonFiniteError",
    "SingularFrontError",
    "ReflectorSet",
    "TruncatedQR",
    "block_householder_qr",
    "truncated_cpqr",
    "apply_reflectors_left",
    "apply_reflectors_left_transpose",
    "tri_solve",
]


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a kernel boundary."""

    def __init__(self, what, cluster=None):
        self.cluster = cluster
        where = "" if cluster is None else f" (cluster {cluster})"
        super().__init__(f"non-finite values in {what}{where}")


class SingularFrontError(np.linalg.LinAlgError):
    """A triangular factor has a zero (or denormal) diagonal entry."""

    def __init__(self, message, cluster=None, level=None):
        self.cluster = cluster
        self.level = level
        ctx = []
        if cluster is not None:
            ctx.append(f"cluster {cluster}")
        if level is not None:
            ctx.append(f"level {level}")
        if ctx:
            message = f"{message} [{', '.join(ctx)}]"
        super().__init__(message)


def _check_finite(B, what, cluster=None):
    if not np.isfinite(B).all():
        raise NonFiniteError(what, cluster)


@dataclass(frozen=True)
class ReflectorSet:
    """Orthogonal transform ``H diag(signs, I)`` stored as packed reflectors.

    ``h`` is ``nrows x k`` with the Householder vectors below the diagonal
    (implicit unit diagonal), ``tau`` has length ``k``.
    """

    h: np.ndarray
    tau: np.ndarray
    signs: np.ndarray

    @property
    def nrows(self) -> int:
        return self.h.shape[0]

    @property
    def size(self) -> int:
        return len(self.tau)

    @classmethod
    def identity(cls, nrows: int) -> "ReflectorSet":
        return cls(np.zeros((nrows, 0), order="F"), np.zeros(0), np.ones(0))

    def truncate(self, k: int) -> "ReflectorSet":
        """The first ``k`` reflectors; the leading ``k`` columns are unchanged."""
        return ReflectorSet(np.asfortranarray(self.h[:, :k]), self.tau[:k].copy(), self.signs[:k].copy())

    @property
    def nnz(self) -> int:
        """Stored entries: each vector on and below its diagonal."""
        m, k = self.h.shape
        return k * m - k * (k - 1) // 2

    def matrix(self) -> np.ndarray:
        """Explicit ``nrows x nrows`` orthogonal matrix."""
        return apply_reflectors_left(self, np.eye(self.nrows))


def _ormqr(trans, refl, B, overwrite=False):
    k = refl.size
    if k == 0 or B.shape[1] == 0:
        return B if overwrite else np.array(B, dtype=float, order="F", copy=True)
    lwork = max(1, 64 * B.shape[1])
    out, _, info = lapack.dormqr(b"L", trans, refl.h, refl.tau, B, lwork, overwrite_c=overwrite)
    if info != 0:
        raise np.linalg.LinAlgError(f"dormqr failed with info={info}")
    return out


def apply_reflectors_left_transpose(refl: ReflectorSet, B: np.ndarray, overwrite: bool = False) -> np.ndarray:
    """Return ``Q^T B`` for the orthogonal ``Q`` represented by ``refl``.

    With ``overwrite`` a Fortran-ordered float ``B`` may be updated in place.
    """
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if B.shape[0] != refl.nrows:
        raise ValueError(f"row dimension {B.shape[0]} != reflector size {refl.nrows}")
    out = _ormqr(b"T", refl, B, overwrite=overwrite and not vec)
    k = refl.size
    out[:k] *= refl.signs[:, None]
    return out[:, 0] if vec else out


def apply_reflectors_left(refl: ReflectorSet, B: np.ndarray) -> np.ndarray:
    """Return ``Q B``."""
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if B.shape[0] != refl.nrows:
        raise ValueError(f"row dimension {B.shape[0]} != reflector size {refl.nrows}")
    k = refl.size
    B = np.array(B, order="F", copy=True)
    B[:k] *= refl.signs[:, None]
    out = _ormqr(b"N", refl, B)
    return out[:, 0] if vec else out


def block_householder_qr(B: np.ndarray, cluster=None):
    """Householder QR ``B = Q [R; 0]`` with a nonnegative diagonal on ``R``.

    Returns ``(ReflectorSet, R)`` where ``R`` is ``min(m, n) x n``.
    Rank-deficient columns simply produce zero diagonal entries.
    """
    B = np.asarray(B, dtype=float)
    m, n = B.shape
    _check_finite(B, "block_householder_qr input", cluster)
    k = min(m, n)
    if k == 0:
        return ReflectorSet.identity(m), np.zeros((0, n))
    h, tau, _, info = lapack.dgeqrf(B)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgeqrf failed with info={info}")
    R = np.triu(h[:k])
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    R *= signs[:, None]
    refl = ReflectorSet(np.asfortranarray(h[:, :k]), tau[:k], signs)
    return refl, R


@dataclass(frozen=True)
class TruncatedQR:
    """Column-pivoted QR cut at the first diagonal below ``eps * |R_11|``.

    ``Q^T B[:, perm] = [R; trailing]`` where ``R`` holds the ``rank`` kept
    rows (upper trapezoidal) and ``trailing`` the remaining ``m - rank`` rows.
    """

    reflectors: ReflectorSet
    R: np.ndarray
    trailing: np.ndarray
    perm: np.ndarray
    rank: int
    eps: float

    def q_matrix(self) -> np.ndarray:
        return self.reflectors.matrix()

    def diag(self) -> np.ndarray:
        k = min(self.R.shape[0], self.R.shape[1])
        return np.abs(np.diag(self.R[:k, :k]))

    def unpermuted_rows(self) -> np.ndarray:
        """Kept rows ``R P^T`` in the original column order."""
        out = np.empty_like(self.R)
        out[:, self.perm] = self.R
        return out


def _rank_from_diag(d, eps):
    if len(d) == 0 or d[0] == 0.0:
        return 0
    # an exactly zero pivot means the remaining block is zero: cut there too
    ok = (d >= eps * d[0]) & (d > 0.0)
    if ok.all():
        return len(d)
    return int(np.argmin(ok))


def _cpqr_lapack(B, eps):
    m, n = B.shape
    k = min(m, n)
    qr, jpvt, tau, _, info = lapack.dgeqp3(B)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgeqp3 failed with info={info}")
    perm = jpvt - 1
    R = np.triu(qr[:k])
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    R *= signs[:, None]
    rank = _rank_from_diag(np.abs(np.diag(R)), eps)
    refl = ReflectorSet(np.asfortranarray(qr[:, :k]), tau[:k], signs)
    trailing = np.zeros((m - rank, n))
    trailing[: k - rank] = R[rank:]
    return TruncatedQR(refl, R[:rank].copy(), trailing, perm, rank, eps)


_RECOMPUTE = np.sqrt(np.finfo(float).eps)


def _cpqr_greedy(B, eps):
    # greedy max-norm pivoting; stops as soon as the next pivot norm falls
    # below eps * |R_11|, so the cost is O(m n rank)
    m, n = B.shape
    k = min(m, n)
    A = np.array(B, dtype=float, order="F", copy=True)
    perm = np.arange(n)
    norms = np.linalg.norm(A, axis=0)
    ref = norms.copy()
    tau = np.zeros(k)
    signs = np.ones(k)
    r11 = norms.max() if n else 0.0
    rank = 0
    for j in range(k):
        p = j + int(np.argmax(norms[j:]))
        if p != j:
            A[:, [j, p]] = A[:, [p, j]]
            perm[[j, p]] = perm[[p, j]]
            norms[[j, p]] = norms[[p, j]]
            ref[[j, p]] = ref[[p, j]]
        x = A[j:, j]
        alpha = x[0]
        xnorm = np.linalg.norm(x[1:])
        colnorm = np.hypot(alpha, xnorm)
        if colnorm == 0.0 or colnorm < eps * r11:
            break
        if xnorm == 0.0:
            t = 0.0
            beta = alpha
        else:
            beta = -np.copysign(colnorm, alpha)
            v = x[1:] / (alpha - beta)
            t = (beta - alpha) / beta
            A[j + 1 :, j] = v
            if j + 1 < n:
                w = A[j, j + 1 :] + v @ A[j + 1 :, j + 1 :]
                A[j, j + 1 :] -= t * w
                A[j + 1 :, j + 1 :] -= t * np.outer(v, w)
        A[j, j] = beta
        tau[j] = t
        if beta < 0:
            signs[j] = -1.0
        rank = j + 1
        if j + 1 < n:
            rest = norms[j + 1 :].copy()
            row = np.abs(A[j, j + 1 :])
            ratio = np.divide(row, rest, out=np.zeros_like(rest), where=rest > 0)
            shrink = np.maximum(0.0, 1.0 - ratio**2)
            base = ref[j + 1 :]
            drift = shrink * np.divide(rest, base, out=np.zeros_like(rest), where=base > 0) ** 2
            rest *= np.sqrt(shrink)
            stale = np.nonzero(drift <= _RECOMPUTE)[0]
            if len(stale):
                idx = stale + j + 1
                rest[stale] = np.linalg.norm(A[j + 1 :, idx], axis=0)
                ref[idx] = rest[stale]
            norms[j + 1 :] = rest
    h = np.asfortranarray(A[:, :rank])
    full = np.triu(A[:rank])
    full *= signs[:rank, None]
    trailing = np.zeros((m - rank, n))
    # past the cut the trailing block is left untriangularized
    trailing[:, rank:] = A[rank:, rank:]
    refl = ReflectorSet(h, tau[:rank], signs[:rank])
    return TruncatedQR(refl, full, trailing, perm, rank, eps)


def truncated_cpqr(B: np.ndarray, eps: float, method: str = "lapack", cluster=None) -> TruncatedQR:
    """Column-pivoted QR truncated by the diagonal-decay rule.

    The rank is the largest ``r`` with ``|R_ii| / |R_11| >= eps`` for all
    ``i <= r`` (``r = 0`` for a zero block).  ``method="lapack"`` runs the full
    ``dgeqp3`` and cuts afterwards; ``method="greedy"`` pivots in numpy and
    stops at the cut.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    B = np.asarray(B, dtype=float)
    _check_finite(B, "truncated_cpqr input", cluster)
    m, n = B.shape
    if min(m, n) == 0:
        return TruncatedQR(
            ReflectorSet.identity(m), np.zeros((0, n)), np.zeros((m, n)), np.arange(n), 0, eps
        )
    if method == "lapack":
        return _cpqr_lapack(B, eps)
    if method == "greedy":
        return _cpqr_greedy(B, eps)
    raise ValueError(f"unknown method {method!r}")


_TINY = np.finfo(float).tiny


def tri_solve(R, B, trans=False, side="left", cluster=None, level=None):
    """Solve with an upper-triangular ``R``.

    ``side="left"``: ``op(R) X = B``; ``side="right"``: ``X op(R) = B`` where
    ``op`` is the transpose when ``trans`` is set.
    """
    R = np.asarray(R, dtype=float)
    B = np.asarray(B, dtype=float)
    if R.shape[0] != R.shape[1]:
        raise ValueError("R must be square")
    d = np.abs(np.diag(R))
    if R.shape[0] and not (d > _TINY).all():
        raise SingularFrontError("singular triangular factor", cluster, level)
    if side == "left":
        return solve_triangular(R, B, trans=1 if trans else 0, check_finite=False)
    if side == "right":
        # X op(R) = B  <=>  op(R)^T X^T = B^T
        return solve_triangular(R, B.T, trans=0 if trans else 1, check_finite=False).T
    raise ValueError(f"unknown side {side!r}")
