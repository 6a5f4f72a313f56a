"""Solves with the factorization: seminormal equations and preconditioned CGLS."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .factorization import Factorization
from .sparse import canonicalize

__all__ = [
    "SolveReport",
    "Preconditioner",
    "IdentityPreconditioner",
    "DiagonalPreconditioner",
    "SpaQRPreconditioner",
    "apply_w_solve",
    "diag_preconditioner",
    "normal_residual",
    "csne_solve",
    "cgls",
]


@dataclass
class SolveReport:
    """Outcome of an iterative solve.

    ``history[k]`` is ``||A^T (A x_k - b)|| / ||A^T b||`` recomputed from the
    iterate itself, so ``len(history) == iterations + 1``.
    """

    iterations: int = 0
    history: list = field(default_factory=list)
    converged: bool = False
    breakdown: bool = False
    tol: float = 1e-12
    timings: dict = field(default_factory=dict)
    n_dropped: int = 0
    method: str = ""

    @property
    def final_residual(self) -> float:
        return self.history[-1] if self.history else float("nan")

    def to_dict(self):
        return {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "breakdown": self.breakdown,
            "tol": self.tol,
            "history": [float(h) for h in self.history],
            "timings": dict(self.timings),
            "n_dropped": self.n_dropped,
        }


class Preconditioner:
    """Right preconditioner ``x = M u``; subclasses supply ``M`` and ``M^T``."""

    name = "none"
    n_dropped = 0

    def apply(self, u):
        raise NotImplementedError

    def apply_t(self, v):
        raise NotImplementedError


class IdentityPreconditioner(Preconditioner):
    name = "none"

    def apply(self, u):
        return np.asarray(u, dtype=float)

    apply_t = apply


class DiagonalPreconditioner(Preconditioner):
    """``M = diag(1 / ||A_:j||)``."""

    name = "diag"

    def __init__(self, d):
        self.inv = 1.0 / np.asarray(d, dtype=float)

    def apply(self, u):
        return self.inv * u

    apply_t = apply


class SpaQRPreconditioner(Preconditioner):
    """``M = D^{-1} W^{-1}`` from a :class:`Factorization`."""

    name = "spaqr"

    def __init__(self, F: Factorization):
        self.F = F
        self.n_dropped = F.n_dropped

    def apply(self, u):
        return self.F.precond(u)

    def apply_t(self, v):
        return self.F.precond_t(v)


def _as_preconditioner(P):
    if P is None:
        return IdentityPreconditioner()
    if isinstance(P, Factorization):
        return SpaQRPreconditioner(P)
    return P


def apply_w_solve(F: Factorization, y, transpose=False):
    """``W^{-1} y`` or, with ``transpose``, ``W^{-T} y``."""
    return F.solve_w(y, transpose=transpose)


def diag_preconditioner(A) -> DiagonalPreconditioner:
    """Scale by reciprocal column norms; rejects zero columns."""
    A = canonicalize(A)
    d = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    zero = np.nonzero(d == 0)[0]
    if len(zero):
        raise ValueError(f"column {zero[0]} is zero")
    return DiagonalPreconditioner(d)


def normal_residual(A, x, b, atb_norm=None):
    """``||A^T (A x - b)|| / ||A^T b||``."""
    g = A.T @ (A @ x - b)
    if atb_norm is None:
        atb_norm = np.linalg.norm(A.T @ b)
    return float(np.linalg.norm(g) / atb_norm) if atb_norm > 0 else float(np.linalg.norm(g))


def csne_solve(A, F: Factorization, b, refinement_steps=None):
    """Corrected seminormal equations: ``W^T W x = A^T b`` plus refinement.

    Each refinement pass solves ``W^T W d = A^T (b - A x)`` and updates ``x``.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if refinement_steps is None:
        refinement_steps = F.config.refinement_steps if F.config is not None else 1
    t0 = time.perf_counter()
    atb = A.T @ b
    nrm = np.linalg.norm(atb)
    x = F.precond(F.precond_t(atb))
    hist = [normal_residual(A, x, b, nrm)]
    for _ in range(refinement_steps):
        r = b - A @ x
        x = x + F.precond(F.precond_t(A.T @ r))
        hist.append(normal_residual(A, x, b, nrm))
    rep = SolveReport(
        iterations=refinement_steps,
        history=hist,
        converged=True,
        tol=float("nan"),
        timings={"solve": time.perf_counter() - t0},
        n_dropped=F.n_dropped,
        method="csne",
    )
    return x, rep


def cgls(A, preconditioner=None, b=None, tol=1e-12, maxit=500, x0=None):
    """CGLS with right preconditioning, ``min ||A M u - b||``, ``x = M u``.

    Parameters
    ----------
    preconditioner : Preconditioner, Factorization or None
    tol : float
        Stop once ``||A^T (A x - b)|| / ||A^T b|| <= tol``.
    """
    A = sp.csr_matrix(A)
    AT = A.T.tocsr()
    M = _as_preconditioner(preconditioner)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"rhs length {b.shape[0]} != {A.shape[0]}")
    t0 = time.perf_counter()
    atb = AT @ b
    nrm = np.linalg.norm(atb)
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    rep = SolveReport(tol=tol, method=M.name, n_dropped=M.n_dropped)
    hist = [normal_residual(A, x, b, nrm) if nrm > 0 else 0.0]
    if nrm == 0 or hist[0] <= tol:
        rep.history, rep.converged = hist, True
        rep.timings["solve"] = time.perf_counter() - t0
        return x, rep
    s = M.apply_t(AT @ r)
    p = s.copy()
    gamma = float(s @ s)
    it = 0
    while it < maxit:
        t = M.apply(p)
        q = A @ t
        qq = float(q @ q)
        if qq == 0.0 or not np.isfinite(qq):
            rep.breakdown = True
            break
        alpha = gamma / qq
        x += alpha * t
        r -= alpha * q
        it += 1
        hist.append(normal_residual(A, x, b, nrm))
        if hist[-1] <= tol:
            rep.converged = True
            break
        s = M.apply_t(AT @ r)
        gnew = float(s @ s)
        if gnew == 0.0:
            rep.breakdown = True
            break
        p = s + (gnew / gamma) * p
        gamma = gnew
    rep.iterations = it
    rep.history = hist
    rep.timings["solve"] = time.perf_counter() - t0
    return x, rep
