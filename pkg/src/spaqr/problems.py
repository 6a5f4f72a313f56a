"""Inverse Poisson least-squares test matrices on 2D and 3D staggered grids.

The discretized variable coefficient Poisson operator at grid node ``e`` is

    f_e(u, z) = -a_0 u_e + sum_k a_k u_{e + d_k}

with ``u`` on the ``n**d`` nodes (zero on the ghost boundary) and ``z`` on the
``(n + 1)**d`` cells.  The least-squares matrix is the transposed Jacobian
``J^T``: one row per variable (``u`` first, then ``z``), one column per
equation, with zero rows removed.

In 3D the neighbor coefficients are taken as ``+1/4`` times the sum of the
four adjacent cells so that ``a_0`` equals their total and constant ``u``
annihilates every ``z`` derivative, exactly as in 2D.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse import canonicalize

__all__ = [
    "InvPoiSpec",
    "GridCoords",
    "InvPoiProblem",
    "gen_invpoi_2d",
    "gen_invpoi_3d",
    "gen_invpoi",
    "invpoi_residual",
    "invpoi_values",
    "jacobian_fd_check",
]


@dataclass(frozen=True)
class InvPoiSpec:
    """Parameters of an inverse Poisson instance.

    ``target_alpha`` selects the side of a centered constant region
    (``u = 1``, ``z = 1``) by bisection; ``region_side`` overrides it.
    """

    dim: int = 2
    n: int = 16
    target_alpha: float | None = 2.0
    seed: int = 0
    region_side: int | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.n < 2:
            raise ValueError("n must be >= 2")


@dataclass
class GridCoords:
    """Coordinates of the retained columns (equation nodes) and rows."""

    cols: np.ndarray
    rows: np.ndarray


@dataclass
class InvPoiProblem:
    A: sp.csc_matrix
    coords: GridCoords
    alpha: float
    region_side: int
    row_vars: np.ndarray
    spec: InvPoiSpec


def _stencil(dim):
    """Terms ``(kappa, node offset, cell offset)`` of f_e.

    Cell ``e + c`` with ``c`` in ``{-1, 0}**d`` touches node ``e``; the
    cell index is shifted by one so cells run over ``0..n``.
    """
    w = 1.0 / 2 ** (dim - 1)
    corners = list(itertools.product((-1, 0), repeat=dim))
    terms = []
    for c in corners:
        terms.append((-dim * w, (0,) * dim, c))
    for axis in range(dim):
        for sgn in (1, -1):
            off = tuple(sgn if a == axis else 0 for a in range(dim))
            for c in corners:
                if c[axis] == (0 if sgn == 1 else -1):
                    terms.append((w, off, c))
    return terms


def invpoi_values(spec: InvPoiSpec, region_side=None):
    """Random ``(u, z)`` with a centered constant block of side ``region_side``."""
    n, d = spec.n, spec.dim
    rng = np.random.default_rng(spec.seed)
    u = rng.uniform(-1.0, 1.0, size=(n,) * d)
    z = rng.uniform(0.5, 1.5, size=(n + 1,) * d)
    s = spec.region_side if region_side is None else region_side
    if s:
        lo = (n - s) // 2
        u[(slice(lo, lo + s),) * d] = 1.0
        # cells surrounding the block nodes (cell index shifted by one)
        z[(slice(lo, lo + s + 1),) * d] = 1.0
    return u, z


def invpoi_residual(u, z):
    """``f(u, z)`` at every node via direct array slicing (ghost ``u = 0``)."""
    d = u.ndim
    n = u.shape[0]
    up = np.zeros((n + 2,) * d)
    up[(slice(1, n + 1),) * d] = u
    out = np.zeros_like(u)
    w = 1.0 / 2 ** (d - 1)

    def zc(c):
        # cell e + c for every node e; z is indexed from -1, so shift by one
        return z[tuple(slice(1 + ci, 1 + ci + n) for ci in c)]

    corners = list(itertools.product((-1, 0), repeat=d))
    a0 = d * w * sum(zc(c) for c in corners)
    out -= a0 * u
    for axis in range(d):
        for sgn in (1, -1):
            keep = 0 if sgn == 1 else -1
            ak = w * sum(zc(c) for c in corners if c[axis] == keep)
            sl = tuple(slice(1 + (sgn if a == axis else 0), 1 + (sgn if a == axis else 0) + n) for a in range(d))
            out += ak * up[sl]
    return out


def _assemble(u, z):
    """Full ``J^T`` (all ``n**d + (n+1)**d`` rows) from the term list."""
    d = u.ndim
    n = u.shape[0]
    N = n**d
    node = np.indices((n,) * d).reshape(d, -1).T
    eq = np.arange(N)
    zf = z.ravel()
    uf = u.ravel()
    node_strides = np.array([n ** (d - 1 - a) for a in range(d)])
    cell_strides = np.array([(n + 1) ** (d - 1 - a) for a in range(d)])
    rows, cols, vals = [], [], []
    for kappa, off, c in _stencil(d):
        nb = node + np.array(off)
        cell = node + np.array(c) + 1
        cid = cell @ cell_strides
        inside = np.all((nb >= 0) & (nb < n), axis=1)
        nid = np.where(inside, nb @ node_strides, 0)
        # d f_e / d u_nb
        rows.append(nid[inside])
        cols.append(eq[inside])
        vals.append(kappa * zf[cid[inside]])
        # d f_e / d z_cell
        rows.append(N + cid[inside])
        cols.append(eq[inside])
        vals.append(kappa * uf[nid[inside]])
    M = N + (n + 1) ** d
    J_T = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, N)
    )
    return canonicalize(J_T)


def _zero_row_mask(JT):
    return np.diff(sp.csr_matrix(JT).indptr) == 0


def _alpha_for(spec, s):
    u, z = invpoi_values(spec, s)
    JT = _assemble(u, z)
    keep = (~_zero_row_mask(JT)).sum()
    return keep / JT.shape[1]


def _choose_side(spec):
    n = spec.n
    target = spec.target_alpha
    hi_alpha = _alpha_for(spec, 0)
    lo_alpha = _alpha_for(spec, n)
    if target is None or target >= hi_alpha:
        if target is not None and target > hi_alpha + 1e-12:
            warnings.warn(
                f"target alpha {target} above achievable {hi_alpha:.4f}; clamped", RuntimeWarning, stacklevel=3
            )
        return 0
    if target <= lo_alpha:
        if target < lo_alpha - 1e-12:
            warnings.warn(
                f"target alpha {target} below achievable {lo_alpha:.4f} at n={n}; clamped",
                RuntimeWarning,
                stacklevel=3,
            )
        return n
    # alpha(s) is nonincreasing in s: find the first side reaching the target
    a, b = 0, n
    while b - a > 1:
        mid = (a + b) // 2
        if _alpha_for(spec, mid) > target:
            a = mid
        else:
            b = mid
    fa, fb = _alpha_for(spec, a), _alpha_for(spec, b)
    return a if abs(fa - target) <= abs(fb - target) else b


def gen_invpoi(spec: InvPoiSpec) -> InvPoiProblem:
    """Build ``J^T`` (zero rows removed) and grid coordinates for ``spec``."""
    s = spec.region_side if spec.region_side is not None else _choose_side(spec)
    u, z = invpoi_values(spec, s)
    JT = _assemble(u, z)
    keep = np.nonzero(~_zero_row_mask(JT))[0]
    A = canonicalize(JT[keep])
    d, n = spec.dim, spec.n
    node = np.indices((n,) * d).reshape(d, -1).T.astype(float)
    cell = np.indices((n + 1,) * d).reshape(d, -1).T - 0.5
    allrows = np.vstack([node, cell])
    coords = GridCoords(node, allrows[keep])
    return InvPoiProblem(A, coords, A.shape[0] / A.shape[1], s, keep, spec)


def gen_invpoi_2d(spec: InvPoiSpec):
    """2D instance; returns ``(J^T, GridCoords)``."""
    if spec.dim != 2:
        raise ValueError("spec.dim must be 2")
    p = gen_invpoi(spec)
    return p.A, p.coords


def gen_invpoi_3d(spec: InvPoiSpec):
    """3D instance; returns ``(J^T, GridCoords)``."""
    if spec.dim != 3:
        raise ValueError("spec.dim must be 3")
    p = gen_invpoi(spec)
    return p.A, p.coords


def jacobian_fd_check(spec: InvPoiSpec, h: float = 1e-6) -> float:
    """Largest gap between assembled ``J^T`` and central differences of f.

    Every variable is perturbed in turn, so keep ``n`` small (``<= 6``).
    """
    s = spec.region_side if spec.region_side is not None else 0
    u, z = invpoi_values(spec, s)
    JT = _assemble(u, z).toarray()
    nu = u.size
    err = 0.0
    for k in range(nu + z.size):
        up, um = u.copy(), u.copy()
        zp, zm = z.copy(), z.copy()
        if k < nu:
            up.flat[k] += h
            um.flat[k] -= h
        else:
            zp.flat[k - nu] += h
            zm.flat[k - nu] -= h
        fd = (invpoi_residual(up, zp) - invpoi_residual(um, zm)).ravel() / (2 * h)
        err = max(err, float(np.abs(fd - JT[k]).max()))
    return err
