"""The sparsified QR factorization of a tall sparse matrix.

The driver walks the elimination tree from the leaves to the root.  At each
level it eliminates the interiors or separators with block Householder QR,
hands the rows left below each triangular factor to ancestor clusters,
then (from the sparsification start level on) scales every remaining
interface, compresses its extra rows, compresses its couplings, and finally
merges interfaces along the cluster hierarchy.

The result is ``W``, a sequence of triangular and orthogonal column
transforms such that ``Q^T A_s W^{-1} ~ [I; 0]`` for the column-scaled matrix
``A_s``.  ``Q`` is only kept on request.

Dense blocks are stored per (row cluster, column cluster) pair.  Columns keep
their original indices as labels, so ``W`` acts on vectors indexed like the
columns of ``A`` and no explicit permutation is ever formed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular

from . import dense
from .dense import SingularFrontError
from .partition import (
    ClusterHierarchy,
    RowAssignment,
    assign_rows,
    default_num_levels,
    infer_interfaces,
    match_rows,
    nested_dissection,
    node_level,
)
from .sparse import ColumnScaling, ata_graph, canonicalize, scale_columns

__all__ = [
    "SolverConfig",
    "TriangularTransform",
    "OrthogonalTransform",
    "RowTransform",
    "Factorization",
    "FactorState",
    "Front",
    "PHASES",
    "factorize_separator",
    "reassign_extra_rows",
    "scale_interface",
    "sparsify_interface_rows",
    "sparsify_interface",
    "merge_level",
    "spaqr_factorize",
    "factorize",
    "FORMAT_VERSION",
]

PHASES = ("Factorize", "Reassign", "Scale", "Sparsify", "Merge")
FORMAT_VERSION = 2


@dataclass
class SolverConfig:
    """Knobs of the factorization.

    Parameters
    ----------
    eps : float
        Truncation tolerance of the rank-revealing QRs (``0`` gives the
        exact multifrontal QR).
    num_levels : int, optional
        Tree levels; ``ceil(log2(N / leaf_cap))`` when omitted.
    skip_levels : int
        Number of elimination levels, counted from the leaves, completed
        before the first scaling and sparsification.
    store_q : bool
        Keep the row transforms making up ``Q``.
    leaf_cap : int
        ``N_0`` of the level formula.
    refinement_steps : int
        Iterative refinement passes used by the seminormal equations solve.
    cpqr_method : {"lapack", "greedy"}
        Kernel of the truncated column-pivoted QR.
    """

    eps: float = 1e-2
    num_levels: int | None = None
    skip_levels: int = 3
    store_q: bool = False
    leaf_cap: int = 64
    refinement_steps: int = 1
    cpqr_method: str = "lapack"

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be >= 0")
        if self.skip_levels < 0:
            raise ValueError("skip_levels must be >= 0")
        if self.num_levels is not None and self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.cpqr_method not in ("lapack", "greedy"):
            raise ValueError(f"unknown cpqr_method {self.cpqr_method!r}")


# -- transforms -------------------------------------------------------------


@dataclass
class TriangularTransform:
    """Column transform ``[[R, Rn], [0, I]]`` on columns ``(cols, ncols)``.

    ``R_s`` from a separator elimination carries the coupling ``Rn``;
    ``R_p`` from an interface scaling has none.
    """

    cols: np.ndarray
    R: np.ndarray
    ncols: np.ndarray
    Rn: np.ndarray

    @property
    def nnz(self) -> int:
        c = len(self.cols)
        return c * (c + 1) // 2 + self.Rn.size

    def inv(self, z):
        s = z[self.cols]
        if len(self.ncols):
            s = s - self.Rn @ z[self.ncols]
        z[self.cols] = solve_triangular(self.R, s, check_finite=False)

    def inv_t(self, z):
        ws = solve_triangular(self.R, z[self.cols], trans=1, check_finite=False)
        z[self.cols] = ws
        if len(self.ncols):
            z[self.ncols] -= self.Rn.T @ ws

    def fwd(self, z):
        s = self.R @ z[self.cols]
        if len(self.ncols):
            s += self.Rn @ z[self.ncols]
        z[self.cols] = s

    def fwd_t(self, z):
        s = z[self.cols]
        if len(self.ncols):
            z[self.ncols] += self.Rn.T @ s
        z[self.cols] = self.R.T @ s


@dataclass
class OrthogonalTransform:
    """Column rotation ``Q`` on ``cols`` kept as reflectors (``W`` holds ``Q^T``).

    Only the reflectors spanning the coarse columns are stored; the rest of
    ``Q`` is any orthogonal completion, since the fine columns are dropped.
    """

    cols: np.ndarray
    refl: dense.ReflectorSet

    @property
    def nnz(self) -> int:
        return self.refl.nnz

    @property
    def Q(self) -> np.ndarray:
        return self.refl.matrix()

    def inv(self, z):
        z[self.cols] = dense.apply_reflectors_left(self.refl, z[self.cols])

    def inv_t(self, z):
        z[self.cols] = dense.apply_reflectors_left_transpose(self.refl, z[self.cols])

    fwd = inv_t
    fwd_t = inv


@dataclass
class RowTransform:
    """Orthogonal row transform of ``Q``: ``y[rows] <- H^T y[rows]``."""

    rows: np.ndarray
    refl: dense.ReflectorSet

    def apply_t(self, y):
        y[self.rows] = dense.apply_reflectors_left_transpose(self.refl, y[self.rows])

    def apply(self, y):
        y[self.rows] = dense.apply_reflectors_left(self.refl, y[self.rows])


@dataclass
class Factorization:
    """Approximate factorization ``Q^T (A D^{-1}) W^{-1} ~ [I; 0]``.

    Attributes
    ----------
    transforms : list
        Column transforms in creation order; ``W^{-1}`` applies them in
        reverse.
    scaling : ColumnScaling
        ``D``, the column norms of the original ``A``.
    q_transforms : list or None
        Row transforms of ``Q`` when requested.
    row_of_col : ndarray
        Row slot whose final row is the unit row of each column (``Q`` only).
    dropped_rows : ndarray
        Row slots discarded by the row compression (``O(eps)`` content).
    zero_rows : ndarray
        Row slots that became exactly zero and were discarded.
    """

    shape: tuple
    transforms: list
    scaling: ColumnScaling | None
    eps: float
    q_transforms: list | None = None
    row_of_col: np.ndarray | None = None
    dropped_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    zero_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stats: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    top_separator: tuple = (0, 0)
    config: SolverConfig | None = None

    @property
    def ncols(self) -> int:
        return self.shape[1]

    @property
    def nnz_w(self) -> int:
        return int(sum(t.nnz for t in self.transforms))

    @property
    def n_dropped(self) -> int:
        return len(self.dropped_rows)

    def _vec(self, y):
        y = np.array(y, dtype=float, copy=True)
        if y.shape[0] != self.ncols:
            raise ValueError(f"vector length {y.shape[0]} != {self.ncols}")
        return y

    def solve_w(self, y, transpose=False):
        """``W^{-1} y`` (or ``W^{-T} y``)."""
        z = self._vec(y)
        if transpose:
            for t in self.transforms:
                t.inv_t(z)
        else:
            for t in reversed(self.transforms):
                t.inv(z)
        return z

    def apply_w(self, y, transpose=False):
        """``W y`` (or ``W^T y``)."""
        z = self._vec(y)
        if transpose:
            for t in reversed(self.transforms):
                t.fwd_t(z)
        else:
            for t in self.transforms:
                t.fwd(z)
        return z

    # preconditioner in the coordinates of the unscaled A
    def precond(self, u):
        """``D^{-1} W^{-1} u``."""
        z = self.solve_w(u)
        return z / self.scaling.d if self.scaling is not None else z

    def precond_t(self, v):
        """``W^{-T} D^{-1} v``."""
        v = np.asarray(v, dtype=float)
        if self.scaling is not None:
            v = v / self.scaling.d
        return self.solve_w(v, transpose=True)

    def apply_q(self, y, transpose=False):
        if self.q_transforms is None:
            raise RuntimeError("factorization was computed without store_q")
        y = np.array(y, dtype=float, copy=True)
        if y.shape[0] != self.shape[0]:
            raise ValueError(f"vector length {y.shape[0]} != {self.shape[0]}")
        if transpose:
            for t in self.q_transforms:
                t.apply_t(y)
        else:
            for t in reversed(self.q_transforms):
                t.apply(y)
        return y

    # -- persistence --
    def dump(self, path):
        """Write a versioned ``.npz`` container (little-endian 8-byte payloads)."""
        kinds, cols, ncols, dat, shapes = [], [], [], [], []
        for t in self.transforms:
            if isinstance(t, TriangularTransform):
                kinds.append(0)
                cols.append(t.cols)
                ncols.append(t.ncols)
                dat.append(t.R.ravel())
                dat.append(t.Rn.ravel())
                shapes.append((len(t.cols), len(t.ncols)))
            else:
                kinds.append(1)
                cols.append(t.cols)
                ncols.append(np.zeros(0, dtype=np.int64))
                r = t.refl
                dat.append(np.asarray(r.h).ravel(order="F"))
                dat.append(np.concatenate([r.tau, r.signs]))
                shapes.append((len(t.cols), r.size))
        i8, f8 = np.dtype("<i8"), np.dtype("<f8")

        def cat(xs, dt):
            return np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)

        np.savez(
            path,
            version=np.array([FORMAT_VERSION], i8),
            shape=np.array(self.shape, i8),
            eps=np.array([self.eps], f8),
            kinds=np.array(kinds, i8),
            sizes=np.array(shapes, i8).reshape(-1, 2),
            cols=cat(cols, i8),
            ncols=cat(ncols, i8),
            data=cat(dat, f8),
            scale=(self.scaling.d if self.scaling is not None else np.zeros(0)).astype(f8),
            dropped=self.dropped_rows.astype(i8),
            zero=self.zero_rows.astype(i8),
        )

    @classmethod
    def load(cls, path) -> "Factorization":
        with np.load(path) as z:
            version = int(z["version"][0])
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported factorization format version {version}")
            shape = tuple(int(v) for v in z["shape"])
            kinds, sizes = z["kinds"], z["sizes"]
            cols, ncols, data = z["cols"], z["ncols"], z["data"]
            pc = pn = pd = 0
            out = []
            for kind, (c, k) in zip(kinds, sizes):
                cc = cols[pc : pc + c]
                pc += c
                if kind == 0:
                    nc = ncols[pn : pn + k]
                    pn += k
                    R = data[pd : pd + c * c].reshape(c, c)
                    pd += c * c
                    Rn = data[pd : pd + c * k].reshape(c, k)
                    pd += c * k
                    out.append(TriangularTransform(cc, R, nc, Rn))
                else:
                    h = data[pd : pd + c * k].reshape(c, k, order="F")
                    pd += c * k
                    tau, signs = data[pd : pd + k], data[pd + k : pd + 2 * k]
                    pd += 2 * k
                    refl = dense.ReflectorSet(np.asfortranarray(h), tau.copy(), signs.copy())
                    out.append(OrthogonalTransform(cc, refl))
            scale = z["scale"]
            F = cls(
                shape,
                out,
                ColumnScaling(scale.copy()) if len(scale) else None,
                float(z["eps"][0]),
                dropped_rows=z["dropped"].copy(),
                zero_rows=z["zero"].copy(),
            )
        return F


# -- factorization state ----------------------------------------------------


@dataclass
class Front:
    """Dense snapshot of one cluster's rows over every column cluster they touch."""

    cluster: int
    rows: np.ndarray
    cols: np.ndarray
    col_clusters: list
    values: np.ndarray
    r: int
    c: int


class _Cluster:
    __slots__ = ("id", "node", "cols", "rows", "blk")

    def __init__(self, cid, node, cols, rows):
        self.id = cid
        self.node = int(node)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.blk = {}

    @property
    def r(self):
        return len(self.rows)

    @property
    def c(self):
        return len(self.cols)


def _stack_rows(parts, ncols):
    return np.vstack(parts) if parts else np.zeros((0, ncols))


class FactorState:
    """Mutable block storage driven by the factorization steps.

    ``clusters[i].blk[j]`` is the dense block of the rows of cluster ``i``
    restricted to the columns of cluster ``j``; ``colnb[j]`` lists the row
    clusters holding such a block.
    """

    def __init__(self, A, hierarchy: ClusterHierarchy, assignment: RowAssignment, config: SolverConfig,
                 clusters_init=None):
        A = canonicalize(A)
        self.shape = A.shape
        self.config = config
        self.hierarchy = hierarchy
        self.L = hierarchy.num_levels
        self.clusters: dict[int, _Cluster] = {}
        self.colnb: dict[int, set] = {}
        self.transforms: list = []
        self.q_transforms: list | None = [] if config.store_q else None
        self.row_of_col = np.full(A.shape[1], -1, dtype=np.int64)
        self.dropped: list = []
        self.zero: list = []
        self.next_id = 0
        # grouping of each separator's live clusters: node -> {group: cluster id}
        self.groups: dict[int, dict[int, int]] = {}
        self._build(A, assignment, clusters_init or hierarchy.initial_clusters())

    # -- construction --
    def _new_cluster(self, node, cols, rows):
        cl = _Cluster(self.next_id, node, cols, rows)
        self.clusters[cl.id] = cl
        self.colnb[cl.id] = set()
        self.next_id += 1
        return cl

    def _build(self, A, assignment, init):
        m, n = A.shape
        col_cluster = np.full(n, -1, dtype=np.int64)
        group_idx = {}
        for k, (node, cols) in enumerate(init):
            col_cluster[cols] = k
            group_idx.setdefault(node, 0)
            gi = group_idx[node]
            group_idx[node] += 1
            if node_level(node) < self.L:
                self.groups.setdefault(node, {})[gi] = k
        if (col_cluster < 0).any():
            raise ValueError("initial clusters do not cover every column")
        owner = np.asarray(assignment.row_owner, dtype=np.int64)
        if owner.shape != (m,) or (owner < 0).any() or (owner >= len(init)).any():
            raise ValueError("row assignment inconsistent with clusters")
        rows_of = np.argsort(owner, kind="stable")
        rb = np.searchsorted(owner[rows_of], np.arange(len(init) + 1))
        colpos = np.zeros(n, dtype=np.int64)
        for k, (node, cols) in enumerate(init):
            colpos[cols] = np.arange(len(cols))
            self._new_cluster(node, cols, rows_of[rb[k] : rb[k + 1]])
        R = sp.csr_matrix(A)
        for k, cl in self.clusters.items():
            if not cl.r:
                continue
            sub = R[cl.rows].tocoo()
            kc = col_cluster[sub.col]
            for j in np.unique(kc):
                sel = kc == j
                B = np.zeros((cl.r, self.clusters[j].c))
                B[sub.row[sel], colpos[sub.col[sel]]] = sub.data[sel]
                cl.blk[int(j)] = B
                self.colnb[int(j)].add(k)

    # -- block helpers --
    def _layout(self, cids):
        offs = {}
        o = 0
        for j in cids:
            offs[j] = (o, o + self.clusters[j].c)
            o += self.clusters[j].c
        return offs, o

    def _gather(self, i, sel, offs, width, out=None):
        """Rows ``sel`` of cluster ``i`` over ``offs``; blocks outside it are skipped."""
        cl = self.clusters[i]
        if out is None:
            out = np.zeros((cl.r if sel is None else len(sel), width))
        for j, B in cl.blk.items():
            ab = offs.get(j)
            if ab is not None:
                out[:, ab[0] : ab[1]] = B if sel is None else B[sel]
        return out

    def _set_block(self, i, j, B, nonzero=None):
        cl = self.clusters[i]
        if nonzero is None:
            nonzero = B.size and B.any()
        if nonzero:
            cl.blk[j] = B
            self.colnb[j].add(i)
        else:
            cl.blk.pop(j, None)
            self.colnb[j].discard(i)

    def _scatter(self, i, sel, data, offs, skip=()):
        """Write ``data`` into rows ``sel`` of cluster ``i`` over the layout."""
        cl = self.clusters[i]
        for j, (a, b) in offs.items():
            if j in skip:
                continue
            seg = data[:, a:b]
            hit = seg.any()
            B = cl.blk.get(j)
            if B is None:
                if not hit:
                    continue
                B = np.zeros((cl.r, b - a))
            B[sel] = seg
            self._set_block(i, j, B, nonzero=True if hit else None)

    def _delete_rows(self, i, pos):
        cl = self.clusters[i]
        keep = np.ones(cl.r, dtype=bool)
        keep[pos] = False
        cl.rows = cl.rows[keep]
        for j in list(cl.blk):
            self._set_block(i, j, cl.blk[j][keep])

    def _append_rows(self, i, slots, data, offs):
        cl = self.clusters[i]
        r0, k = cl.r, len(slots)
        cl.rows = np.concatenate([cl.rows, slots])
        touched = set(cl.blk) | set(offs)
        for j in touched:
            if j in offs:
                a, b = offs[j]
                seg = data[:, a:b]
            else:
                seg = None
            B = cl.blk.get(j)
            if B is None:
                if seg is None or not seg.any():
                    continue
                B = np.zeros((r0, b - a))
            out = np.empty((r0 + k, B.shape[1]))
            out[:r0] = B
            if seg is None:
                out[r0:] = 0.0
            else:
                out[r0:] = seg
            # stored blocks are nonzero, and a new block was checked above
            self._set_block(i, j, out, nonzero=True)

    def _record_q(self, slots, refl):
        if self.q_transforms is not None and refl.size:
            self.q_transforms.append(RowTransform(np.array(slots, dtype=np.int64), refl))

    def front(self, cid) -> Front:
        """Dense view of cluster ``cid``'s rows and every column they touch."""
        cl = self.clusters[cid]
        K = [cid] + sorted(j for j in cl.blk if j != cid)
        offs, width = self._layout(K)
        vals = self._gather(cid, None, offs, width)
        cols = np.concatenate([self.clusters[j].cols for j in K]) if K else np.zeros(0, np.int64)
        return Front(cid, cl.rows.copy(), cols, K, vals, cl.r, cl.c)

    def alive(self):
        return sorted(self.clusters)

    def clusters_at_level(self, level):
        return [i for i in sorted(self.clusters) if node_level(self.clusters[i].node) == level]

    def dense_matrix(self):
        """Current trailing matrix as a dense ``(slots x columns)`` array (testing aid)."""
        m, n = self.shape
        out = np.zeros((m, n))
        for cl in self.clusters.values():
            for j, B in cl.blk.items():
                out[np.ix_(cl.rows, self.clusters[j].cols)] = B
        return out


# -- elementary steps -------------------------------------------------------


def factorize_separator(state: FactorState, cid: int, level=None):
    """Eliminate cluster ``cid`` by block Householder QR.

    The own rows of the cluster are triangularized first.  The rows of other
    clusters that touch its columns are then folded in one tree node at a
    time, deepest first, so every row returned to a cluster only couples
    clusters on a single root path.  Emits ``R_s`` and returns the extra rows
    ``(slots, data, layout, owners)`` for :func:`reassign_extra_rows`, where
    ``owners`` lists the clusters whose rows touched ``cid``.
    """
    cl = state.clusters[cid]
    c = cl.c
    touching = {}
    for i in sorted(state.colnb[cid]):
        if i == cid:
            continue
        B = state.clusters[i].blk[cid]
        sel = np.nonzero(B.any(axis=1))[0]
        if len(sel):
            touching[i] = sel
    # only column clusters where some participating row is nonzero; the
    # remaining blocks are zero on these rows and stay so under the QR
    K = {cid}
    K.update(cl.blk)
    for i, sel in touching.items():
        K.update(j for j, B in state.clusters[i].blk.items() if j not in K and B[sel].any())
    K = [cid] + sorted(K - {cid})
    offs, width = state._layout(K)

    F = state._gather(cid, None, offs, width, out=np.zeros((cl.r, width), order="F"))
    refl, _ = dense.block_householder_qr(F[:, :c], cluster=cid)
    F = _apply_on_support(refl, F)
    state._record_q(cl.rows, refl)
    k0 = min(c, cl.r)
    Rcur = F[:k0]
    Rcur[:, :c] = np.triu(Rcur[:, :c])
    rslots = cl.rows[:k0]
    extra = F[k0:]
    extra[:, :c] = 0.0
    eslots = cl.rows[k0:]

    # fold in the touching rows, deepest tree node first
    bynode = {}
    for i in touching:
        bynode.setdefault(state.clusters[i].node, []).append(i)
    order = sorted(bynode, key=lambda nd: (-node_level(nd), nd))
    for nd in order:
        members = sorted(bynode[nd])
        tslots = np.concatenate([state.clusters[i].rows[touching[i]] for i in members])
        nr = Rcur.shape[0]
        S = np.zeros((nr + len(tslots), width), order="F")
        S[:nr] = Rcur
        pos = nr
        for i in members:
            cnt = len(touching[i])
            state._gather(i, touching[i], offs, width, out=S[pos : pos + cnt])
            pos += cnt
        refl, _ = dense.block_householder_qr(S[:, :c], cluster=cid)
        S = _apply_on_support(refl, S)
        allslots = np.concatenate([rslots, tslots])
        state._record_q(allslots, refl)
        k1 = min(c, S.shape[0])
        # rows consumed into R (only while R is still short) leave their cluster
        gone = k1 - len(rslots)
        Rcur = S[:k1]
        Rcur[:, :c] = np.triu(Rcur[:, :c])
        back = S[k1:]
        back[:, :c] = 0.0
        rslots = allslots[:k1]
        pos = 0
        for i in members:
            sel = touching[i]
            cnt = len(sel)
            lo = max(pos, gone)
            take = np.arange(lo, pos + cnt) - gone
            keep_sel = sel[lo - pos :]
            if len(keep_sel):
                state._scatter(i, keep_sel, back[take], offs, skip=(cid,))
            if lo > pos:
                state._delete_rows(i, sel[: lo - pos])
            pos += cnt

    if Rcur.shape[0] < c:
        raise SingularFrontError(
            f"cluster has {Rcur.shape[0]} rows for {c} columns", cid, level
        )
    Rss = Rcur[:, :c]
    d = np.abs(np.diag(Rss))
    if c and not (d > max(d.max(), 1.0) * 1e-14).all():
        raise SingularFrontError("numerically singular diagonal block", cid, level)

    nz = [j for j in K[1:] if Rcur[:, offs[j][0] : offs[j][1]].any()]
    if nz:
        ncols = np.concatenate([state.clusters[j].cols for j in nz])
        Rn = np.hstack([Rcur[:, offs[j][0] : offs[j][1]] for j in nz])
    else:
        ncols = np.zeros(0, dtype=np.int64)
        Rn = np.zeros((c, 0))
    if c:
        state.transforms.append(TriangularTransform(cl.cols.copy(), np.ascontiguousarray(Rss), ncols, np.ascontiguousarray(Rn)))
        state.row_of_col[cl.cols] = rslots

    # retire the cluster and its column
    for i in list(state.colnb[cid]):
        state.clusters[i].blk.pop(cid, None)
    del state.colnb[cid]
    for j in list(cl.blk):
        if j != cid:
            state.colnb[j].discard(cid)
    del state.clusters[cid]
    del offs[cid]
    # owners of the extra rows: the clusters whose rows touched cid
    owners = sorted(i for i in touching if i in state.clusters and i in offs)
    return eslots, extra[:, c:], _shift_layout(offs, c), owners


def _apply_on_support(refl, S):
    """Apply ``Q^T`` to ``S`` on its nonzero columns only; zero columns stay zero."""
    nz = np.flatnonzero(S.any(axis=0))
    if len(nz) > 0.8 * S.shape[1]:
        return dense.apply_reflectors_left_transpose(refl, S, overwrite=True)
    S[:, nz] = dense.apply_reflectors_left_transpose(refl, np.asfortranarray(S[:, nz]), overwrite=True)
    return S


def _shift_layout(offs, c):
    return {j: (a - c, b - c) for j, (a, b) in offs.items()}


def reassign_extra_rows(rows, layout, candidates=None, fallback=None, cluster_ids=None):
    """Owner of every extra row: argmax over candidate clusters of the squared
    row mass on their columns, ties to the lowest id.

    Parameters
    ----------
    rows : ndarray (k, width)
        Extra rows over the column layout.
    layout : dict
        Column cluster id -> ``(start, stop)`` within ``rows``.
    candidates : iterable, optional
        Allowed owners (defaults to every cluster of the layout).
    fallback : int, optional
        Owner of rows with no mass on any candidate.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    cand = sorted(layout if candidates is None else candidates)
    if not cand:
        return np.full(rows.shape[0], -1 if fallback is None else fallback, dtype=np.int64)
    W = np.stack([(rows[:, layout[j][0] : layout[j][1]] ** 2).sum(axis=1) for j in cand], axis=1)
    best = np.argmax(W, axis=1)  # first maximum = lowest id
    out = np.asarray(cand, dtype=np.int64)[best]
    empty = W.max(axis=1) == 0
    if empty.any():
        out[empty] = -1 if fallback is None else fallback
    return out


def _reassign(state: FactorState, slots, E, offs, owners=None):
    """Compress the extra rows of an eliminated cluster and hand them out."""
    if not len(slots):
        return
    support = np.nonzero(E.any(axis=0))[0]
    if len(slots) > len(support):
        # exact compression: only len(support) independent rows can exist
        refl, R = dense.block_householder_qr(E[:, support])
        state._record_q(slots, refl)
        Ek = np.zeros((R.shape[0], E.shape[1]))
        Ek[:, support] = R
        state.zero.append(slots[R.shape[0] :])
        slots, E = slots[: R.shape[0]], Ek
    nz = E.any(axis=1)
    state.zero.append(slots[~nz])
    slots, E = slots[nz], E[nz]
    if not len(slots):
        return
    full = reassign_extra_rows(E, offs)
    dest = reassign_extra_rows(E, offs, candidates=owners, fallback=-1) if owners else full
    dest = np.where(dest < 0, full, dest)
    for k in np.unique(dest):
        sel = dest == k
        state._append_rows(int(k), slots[sel], E[sel], offs)


def scale_interface(state: FactorState, cid: int, level=None):
    """Make the diagonal block of interface ``cid`` equal ``[I; 0]``.

    Emits ``R_p`` into ``W``; the rows are rotated by ``U_p``.  Raises
    :class:`SingularFrontError` if the diagonal block is rank deficient.
    """
    cl = state.clusters[cid]
    c = cl.c
    if c == 0:
        return
    if cl.r < c:
        raise SingularFrontError(f"{cl.r} rows for {c} columns", cid, level)
    App = cl.blk.get(cid)
    if App is None:
        raise SingularFrontError("empty diagonal block", cid, level)
    refl, R = dense.block_householder_qr(App, cluster=cid)
    d = np.abs(np.diag(R))
    if not (d > d.max() * 1e-12).all():
        raise SingularFrontError("rank-deficient diagonal block", cid, level)
    K = [cid] + sorted(j for j in cl.blk if j != cid)
    offs, width = state._layout(K)
    F = dense.apply_reflectors_left_transpose(refl, state._gather(cid, None, offs, width))
    state._record_q(cl.rows, refl)
    for j in K[1:]:
        a, b = offs[j]
        state._set_block(cid, j, np.ascontiguousarray(F[:, a:b]))
    for i in state.colnb[cid] - {cid}:
        B = state.clusters[i].blk[cid]
        state.clusters[i].blk[cid] = dense.tri_solve(R, B, side="right", cluster=cid, level=level)
    eye = np.zeros((cl.r, c))
    eye[np.arange(c), np.arange(c)] = 1.0
    cl.blk[cid] = eye
    state.colnb[cid].add(cid)
    state.transforms.append(TriangularTransform(cl.cols.copy(), R, np.zeros(0, np.int64), np.zeros((c, 0))))


def sparsify_interface_rows(state: FactorState, cid: int, eps: float):
    """Step 1: compress the rows below the identity of a scaled interface.

    Keeps the ``rank`` rows of a truncated pivoted QR of ``A_{p2 n}`` and
    drops the rest.  Returns the number of dropped rows.
    """
    cl = state.clusters[cid]
    c = cl.c
    m2 = cl.r - c
    if m2 <= 0 or c == 0:
        return 0
    K = sorted(j for j in cl.blk if j != cid)
    offs, width = state._layout(K)
    B = state._gather(cid, np.arange(c, cl.r), offs, width)
    slots2 = cl.rows[c:]
    if width == 0 or not B.any():
        state.zero.append(slots2)
        state._delete_rows(cid, np.arange(c, cl.r))
        return m2
    t = dense.truncated_cpqr(B, eps, method=state.config.cpqr_method, cluster=cid)
    if t.rank == m2:
        return 0
    state._record_q(slots2, t.reflectors)
    new = t.unpermuted_rows()
    # rows past min(m2, width) are zero by construction, not truncated
    cut = min(m2, width)
    state.dropped.append(slots2[t.rank : cut])
    state.zero.append(slots2[cut:])
    state._delete_rows(cid, np.arange(c + t.rank, cl.r))
    state._scatter(cid, np.arange(c, c + t.rank), new, offs)
    return m2 - t.rank


def sparsify_interface(state: FactorState, cid: int, eps: float):
    """Step 2: compress ``[A_np^T  A_{p1 n}]`` and drop the fine columns.

    Emits ``Q_p`` into ``W``; returns the number of fine columns removed.
    """
    cl = state.clusters[cid]
    c = cl.c
    if c == 0:
        return 0
    nbr_rows = sorted(state.colnb[cid] - {cid})
    nbr_cols = sorted(j for j in cl.blk if j != cid)
    offs, width = state._layout(nbr_cols)
    top = state._gather(cid, np.arange(c), offs, width)
    parts = [state.clusters[i].blk[cid].T for i in nbr_rows]
    B = np.hstack(parts + [top]) if parts else top
    if B.shape[1] == 0 or not B.any():
        rank = 0
        Q = np.eye(c)
        refl = dense.ReflectorSet.identity(c)
    else:
        t = dense.truncated_cpqr(B, eps, method=state.config.cpqr_method, cluster=cid)
        rank = t.rank
        if rank == c:
            return 0
        refl = t.reflectors.truncate(rank)
        Q = refl.matrix()
    if refl.size:
        state.transforms.append(OrthogonalTransform(cl.cols.copy(), refl))
    state._record_q(cl.rows[:c], refl)
    # columns: A_np Q, keep the coarse part
    for i in nbr_rows:
        state._set_block(i, cid, state.clusters[i].blk[cid] @ Q[:, :rank])
    # rows: Q^T A_{p1 n}, keep the coarse rows
    newtop = Q.T @ top
    fine_cols = cl.cols[rank:]
    state.row_of_col[fine_cols] = cl.rows[rank:c]
    m2 = cl.r - c
    state._scatter(cid, np.arange(c), newtop, offs)
    state._delete_rows(cid, np.arange(rank, c))
    cl.cols = cl.cols[:rank]
    eye = np.zeros((rank + m2, rank))
    eye[np.arange(rank), np.arange(rank)] = 1.0
    state._set_block(cid, cid, eye)
    return c - rank


def merge_level(state: FactorState, lp: int):
    """Merge the interfaces of every remaining separator from grouping ``lp``
    to grouping ``lp - 1``."""
    H = state.hierarchy
    for node in sorted(state.groups):
        if node_level(node) >= lp:
            continue
        live = state.groups[node]
        mmap = H.merge_map(node, lp)
        target = {}
        for g, cid in sorted(live.items()):
            target.setdefault(int(mmap[g]), []).append(cid)
        newgroups = {}
        for tg, members in sorted(target.items()):
            newgroups[tg] = members[0] if len(members) == 1 else _merge(state, members)
        state.groups[node] = newgroups


def _merge(state: FactorState, members):
    members = sorted(members)
    cls = [state.clusters[i] for i in members]
    node = cls[0].node
    m = state._new_cluster(node, np.concatenate([c.cols for c in cls]), np.concatenate([c.rows for c in cls]))
    mset = set(members)
    roffs = {}
    o = 0
    for c in cls:
        roffs[c.id] = (o, o + c.r)
        o += c.r
    coffs = {}
    o = 0
    for c in cls:
        coffs[c.id] = (o, o + c.c)
        o += c.c
    # row side (including the new diagonal block)
    outer = set()
    for c in cls:
        outer.update(j for j in c.blk if j not in mset)
    for j in sorted(outer):
        B = np.zeros((m.r, state.clusters[j].c))
        for c in cls:
            if j in c.blk:
                a, b = roffs[c.id]
                B[a:b] = c.blk[j]
        m.blk[j] = B
        state.colnb[j].add(m.id)
    D = np.zeros((m.r, m.c))
    for ci in cls:
        for cj in cls:
            blk = ci.blk.get(cj.id)
            if blk is not None:
                a, b = roffs[ci.id]
                p, q = coffs[cj.id]
                D[a:b, p:q] = blk
    if D.any():
        m.blk[m.id] = D
        state.colnb[m.id].add(m.id)
    # column side
    rowcl = set()
    for c in cls:
        rowcl.update(i for i in state.colnb[c.id] if i not in mset)
    for i in sorted(rowcl):
        ri = state.clusters[i]
        B = np.zeros((ri.r, m.c))
        for c in cls:
            blk = ri.blk.pop(c.id, None)
            if blk is not None:
                p, q = coffs[c.id]
                B[:, p:q] = blk
        ri.blk[m.id] = B
        state.colnb[m.id].add(i)
    for c in cls:
        for j in c.blk:
            if j not in mset:
                state.colnb[j].discard(c.id)
        del state.colnb[c.id]
        del state.clusters[c.id]
    return m.id


# -- driver -----------------------------------------------------------------


def _quartiles(x):
    # min, quartiles, max; all zeros for an empty level (see the front counts)
    if not len(x):
        return [0.0, 0.0, 0.0, 0.0, 0.0]
    return [float(v) for v in np.percentile(x, [0, 25, 50, 75, 100])]


def _aspects(state):
    out = [cl.r / cl.c for cl in state.clusters.values() if cl.c > 0]
    return np.asarray(out)


def spaqr_factorize(A, hierarchy: ClusterHierarchy, rows: RowAssignment, config: SolverConfig,
                    scaling: ColumnScaling | None = None, observer=None) -> Factorization:
    """Run the level-by-level factorization on a column-scaled ``A``.

    Returns a :class:`Factorization` with ``W`` and, on request, ``Q``.
    ``config.eps == 0`` performs the exact multifrontal QR.

    ``observer(event, level, state, cid)`` is called around every step
    (testing aid).  Events: ``pre_factorize``, ``post_factorize`` (the extra
    rows are not yet back in ``state``), ``post_reassign``, ``post_scale``,
    ``post_step1``, ``post_step2``, ``post_merge``.
    """
    notify = observer or (lambda *a: None)
    A = canonicalize(A)
    m, n = A.shape
    if m < n:
        raise ValueError(f"need at least as many rows as columns, got {m}x{n}")
    state = FactorState(A, hierarchy, rows, config)
    L = hierarchy.num_levels
    stats = []
    top = (0, 0)
    t_all = time.perf_counter()

    def root_size(top):
        # top separator: the root's fronts once nothing else is left, before
        # they are compressed or eliminated
        cls = state.clusters.values()
        if top == (0, 0) and cls and all(cl.node == 1 for cl in cls):
            return sum(cl.r for cl in cls), sum(cl.c for cl in cls)
        return top

    for lev in range(L, 0, -1):
        top = root_size(top)
        tm = dict.fromkeys(PHASES, 0.0)
        st = {"level": lev, "sparsified": False}
        seps = state.clusters_at_level(lev)
        st["eliminated"] = len(seps)
        st["front_sizes"] = _quartiles([state.clusters[s].c for s in seps])
        for s in seps:
            notify("pre_factorize", lev, state, s)
            t0 = time.perf_counter()
            try:
                slots, E, offs, owners = factorize_separator(state, s, level=lev)
            except SingularFrontError as err:
                if err.level is None:
                    err.level = lev
                raise
            t1 = time.perf_counter()
            notify("post_factorize", lev, state, s)
            t1b = time.perf_counter()
            _reassign(state, slots, E, offs, owners)
            t2 = time.perf_counter()
            notify("post_reassign", lev, state, s)
            tm["Factorize"] += t1 - t0
            tm["Reassign"] += t2 - t1b
        top = root_size(top)

        sparsify = (L - lev + 1) > config.skip_levels and lev > 1
        if sparsify and state.clusters:
            st["sparsified"] = True
            t0 = time.perf_counter()
            skipped = set()
            for p in sorted(state.clusters):
                try:
                    scale_interface(state, p, level=lev)
                except SingularFrontError:
                    skipped.add(p)
            tm["Scale"] += time.perf_counter() - t0
            notify("post_scale", lev, state, None)
            st["aspect_before"] = _quartiles(_aspects(state))
            t0 = time.perf_counter()
            ndrop = 0
            for p in sorted(state.clusters):
                if p not in skipped:
                    ndrop += sparsify_interface_rows(state, p, config.eps)
            tm["Sparsify"] += time.perf_counter() - t0
            notify("post_step1", lev, state, None)
            st["aspect_step1"] = _quartiles(_aspects(state))
            t0 = time.perf_counter()
            nfine = 0
            for p in sorted(state.clusters):
                if p not in skipped:
                    nfine += sparsify_interface(state, p, config.eps)
            tm["Sparsify"] += time.perf_counter() - t0
            notify("post_step2", lev, state, None)
            st["aspect_step2"] = _quartiles(_aspects(state))
            st["fronts_step2"] = len(_aspects(state))
            st["dropped_rows"] = ndrop
            st["fine_cols"] = nfine
            st["scale_skipped"] = len(skipped)
        t0 = time.perf_counter()
        if lev > 1:
            merge_level(state, lev)
        tm["Merge"] += time.perf_counter() - t0
        notify("post_merge", lev, state, None)
        st["interface_sizes"] = _quartiles([cl.c for cl in state.clusters.values()])
        st["aspect_after"] = _quartiles(_aspects(state))
        st["fronts_after"] = len(_aspects(state))
        st["active_clusters"] = len(state.clusters)
        st["times"] = tm
        stats.append(st)
    t_factor = time.perf_counter() - t_all

    # leftover rows (no columns remain) carry only residual
    for cl in list(state.clusters.values()):
        if cl.c == 0 and cl.r:
            state.zero.append(cl.rows)
        elif cl.c:
            raise RuntimeError(f"cluster {cl.id} was never eliminated")

    def _cat(xs):
        return np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, dtype=np.int64)

    return Factorization(
        shape=(m, n),
        transforms=state.transforms,
        scaling=scaling,
        eps=config.eps,
        q_transforms=state.q_transforms,
        row_of_col=state.row_of_col,
        dropped_rows=_cat(state.dropped),
        zero_rows=_cat(state.zero),
        stats=stats,
        timings={"factor": t_factor},
        top_separator=top,
        config=config,
    )


def factorize(A, config: SolverConfig | None = None, coords=None, parts=None, observer=None) -> Factorization:
    """Scale, partition, match and factorize ``A`` in one call.

    ``timings`` gains ``partition`` (ordering, matching and assignment).
    """
    config = config or SolverConfig()
    A = canonicalize(A)
    m, n = A.shape
    if m < n:
        raise ValueError(f"need at least as many rows as columns, got {m}x{n}")
    t0 = time.perf_counter()
    As, scaling = scale_columns(A)
    G = ata_graph(As)
    L = config.num_levels or default_num_levels(n, config.leaf_cap)
    tree = nested_dissection(G, L, coords=coords, parts=parts, leaf_cap=config.leaf_cap)
    H = infer_interfaces(tree, G)
    init = H.initial_clusters()
    cluster_of_col = np.empty(n, dtype=np.int64)
    for k, (_, cols) in enumerate(init):
        cluster_of_col[cols] = k
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        matching = match_rows(As)
    # zero rows go to the first root cluster
    root_first = next((k for k, (node, _) in enumerate(init) if node == 1), 0)
    rows = assign_rows(As, cluster_of_col, matching, zero_row_owner=root_first)
    t_p = time.perf_counter() - t0
    F = spaqr_factorize(As, H, rows, config, scaling=scaling, observer=observer)
    F.timings["partition"] = t_p
    return F
