"""Nested dissection on the column graph, interface clustering and row assignment.

Tree nodes use heap numbering: the root is node 1 at level 1 and node ``k``
has children ``2k`` and ``2k + 1``.  With ``L`` levels the leaves are the
nodes ``2**(L-1) .. 2**L - 1``.  Every vertex (column) lives in exactly one
node: either in the interior of a leaf or in the separator of an internal
node.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SeparatorTree",
    "ClusterHierarchy",
    "Matching",
    "RowAssignment",
    "default_num_levels",
    "nested_dissection",
    "read_part_vector",
    "read_coordinates",
    "infer_interfaces",
    "order_columns",
    "match_rows",
    "assign_rows",
]


def default_num_levels(ncols: int, leaf_cap: int = 64) -> int:
    """``ceil(log2(N / leaf_cap))``, at least 1."""
    if ncols <= leaf_cap:
        return 1
    return max(1, math.ceil(math.log2(ncols / leaf_cap) - 1e-12))


def node_level(node) -> np.ndarray | int:
    """Level of a heap-numbered node (root = 1)."""
    if np.isscalar(node):
        return int(node).bit_length()
    node = np.asarray(node, dtype=np.int64)
    return np.floor(np.log2(np.maximum(node, 1))).astype(np.int64) + 1


def ancestor_at(node, node_lev, level):
    """Ancestor of ``node`` (at ``node_lev``) that sits on ``level <= node_lev``."""
    return np.right_shift(node, node_lev - level)


@dataclass
class SeparatorTree:
    """Nested dissection tree.

    Attributes
    ----------
    num_levels : int
        ``L``; the root is level 1, leaves are level ``L``.
    node_of : ndarray of int
        Node owning each vertex (leaf interior or internal separator).
    """

    num_levels: int
    node_of: np.ndarray
    leaf_cap: int = 64

    @property
    def nvertices(self) -> int:
        return len(self.node_of)

    @property
    def nnodes(self) -> int:
        return 2**self.num_levels - 1

    def level_of_vertex(self) -> np.ndarray:
        return node_level(self.node_of)

    def is_leaf(self, node: int) -> bool:
        return node_level(node) == self.num_levels

    def nodes_at(self, level: int) -> range:
        return range(2 ** (level - 1), 2**level)

    def separator(self, node: int) -> np.ndarray:
        """Vertices owned by ``node`` (the interior set for a leaf)."""
        return np.nonzero(self.node_of == node)[0]

    def subtree_mask(self, node: int) -> np.ndarray:
        """Boolean mask of the vertices in the subtree rooted at ``node``."""
        lev = self.level_of_vertex()
        lv = node_level(node)
        ok = lev >= lv
        anc = np.where(ok, ancestor_at(self.node_of, np.maximum(lev, lv), lv), 0)
        return ok & (anc == node)

    def vertices(self, node: int) -> np.ndarray:
        return np.nonzero(self.subtree_mask(node))[0]

    def is_ancestor_or_self(self, a: int, b: int) -> bool:
        """True when ``a`` is ``b`` or an ancestor of ``b``."""
        la, lb = node_level(a), node_level(b)
        return la <= lb and (b >> (lb - la)) == a

    def comparable(self, a: int, b: int) -> bool:
        return self.is_ancestor_or_self(a, b) or self.is_ancestor_or_self(b, a)


# -- bisection strategies ---------------------------------------------------


def _split_geometric(coords):
    def split(verts, sub):
        x = coords[verts]
        axis = int(np.argmax(x.max(axis=0) - x.min(axis=0)))
        c = x[:, axis]
        t = np.median(c)
        left = c < t
        if not left.any() or left.all():
            order = np.lexsort((verts, c))
            left = np.zeros(len(verts), dtype=bool)
            left[order[: len(verts) // 2]] = True
        return left

    return split


def _pseudo_peripheral(sub, start):
    # repeated BFS from the last, lowest-degree vertex of the deepest level
    deg = np.diff(sub.indptr)
    v, ecc = start, -1
    for _ in range(8):
        lev = _bfs_levels(sub, v)
        e = lev.max()
        if e <= ecc:
            break
        ecc = e
        far = np.nonzero(lev == e)[0]
        v = int(far[np.argmin(deg[far])])
    return v


def _bfs_levels(sub, root):
    n = sub.shape[0]
    lev = np.full(n, -1, dtype=np.int64)
    lev[root] = 0
    frontier = np.array([root])
    d = 0
    while len(frontier):
        d += 1
        nb = np.unique(sub[frontier].indices)
        nb = nb[lev[nb] < 0]
        lev[nb] = d
        frontier = nb
    return lev


def _split_bfs(verts, sub):
    n = len(verts)
    ncomp, comp = sp.csgraph.connected_components(sub, directed=False)
    key = np.zeros(n, dtype=np.int64)
    offset = 0
    for c in range(ncomp):
        members = np.nonzero(comp == c)[0]
        root = _pseudo_peripheral(sub, int(members[0]))
        lev = _bfs_levels(sub, root)
        key[members] = lev[members] + offset
        offset += lev[members].max() + 1
    order = np.lexsort((np.arange(n), key))
    left = np.zeros(n, dtype=bool)
    left[order[: n // 2]] = True
    return left


def _split_parts(leaf_of, num_levels):
    def split(verts, sub, node):
        depth = num_levels - node_level(node)
        # left child subtree holds leaves whose bit below node's prefix is 0
        return ((leaf_of[verts] >> (depth - 1)) & 1) == 0

    return split


def _separator_from_split(sub, left):
    """Vertex separator from a two-way split, then minimalized.

    Returns labels 0 (left), 1 (right), 2 (separator).
    """
    n = sub.shape[0]
    lab = np.where(left, 0, 1).astype(np.int8)
    if n == 0:
        return lab
    coo = sub.tocoo()
    cross = lab[coo.row] != lab[coo.col]
    bl = np.unique(coo.row[cross & (lab[coo.row] == 0)])
    br = np.unique(coo.row[cross & (lab[coo.row] == 1)])
    # smaller boundary; on a tie take it from the larger side for balance
    if len(bl) != len(br):
        lab[bl if len(bl) < len(br) else br] = 2
    else:
        lab[bl if left.sum() > n - left.sum() else br] = 2
    return _minimalize(sub, lab)


def _minimalize(sub, lab):
    # move separator vertices that touch only one side into that side
    for _ in range(64):
        moved = False
        for side in (0, 1):
            sep = np.nonzero(lab == 2)[0]
            if not len(sep):
                break
            block = sub[sep]
            nbl = lab[block.indices]
            rowid = np.repeat(np.arange(len(sep)), np.diff(block.indptr))
            touch = np.zeros((len(sep), 2), dtype=bool)
            m = nbl < 2
            touch[rowid[m], nbl[m]] = True
            other = 1 - side
            if side == 0:
                # vertices adjacent to neither side go to the smaller side
                nleft, nright = (lab == 0).sum(), (lab == 1).sum()
                small = 0 if nleft <= nright else 1
                free = ~touch[:, 0] & ~touch[:, 1]
                lab[sep[free]] = small
                moved |= bool(free.any())
                keep = ~free
            else:
                keep = np.ones(len(sep), dtype=bool)
            go = keep & touch[:, side] & ~touch[:, other]
            lab[sep[go]] = side
            moved |= bool(go.any())
        if not moved:
            break
    return lab


def _level_separator(sub):
    """Middle level of a BFS level structure; always a separator.

    Fallback for small, dense pieces where every vertex of a bisection lies on
    its boundary and the boundary separator swallows a whole side.
    """
    n = sub.shape[0]
    ncomp, comp = sp.csgraph.connected_components(sub, directed=False)
    lab = np.zeros(n, dtype=np.int8)
    if ncomp > 1:
        # whole components on either side, no separator needed
        sizes = np.bincount(comp)
        side = np.zeros(ncomp, dtype=np.int8)
        load = [0, 0]
        for c in np.argsort(-sizes, kind="stable"):
            k = 0 if load[0] <= load[1] else 1
            side[c] = k
            load[k] += sizes[c]
        return side[comp]
    lev = _bfs_levels(sub, _pseudo_peripheral(sub, 0))
    top = lev.max()
    if top < 2:
        return lab
    cum = np.cumsum(np.bincount(lev))
    k = int(np.clip(np.searchsorted(cum, n / 2.0), 1, top - 1))
    lab = np.where(lev < k, 0, np.where(lev > k, 1, 2)).astype(np.int8)
    return _minimalize(sub, lab)


def nested_dissection(graph, num_levels=None, coords=None, parts=None, leaf_cap=64) -> SeparatorTree:
    """Recursive vertex-separator bisection of ``graph``.

    Parameters
    ----------
    graph : sparse matrix
        Symmetric adjacency (e.g. from :func:`spaqr.sparse.ata_graph`).
    num_levels : int, optional
        Total tree levels ``L``; defaults to :func:`default_num_levels`.
    coords : ndarray (N, d), optional
        Vertex coordinates; selects geometric bisection along the longest axis.
    parts : ndarray (N,), optional
        Leaf ids in ``[0, 2**(L-1))`` from an external partitioner.  Separators
        are carved out of the induced two-way splits.
    """
    G = sp.csr_matrix(graph)
    n = G.shape[0]
    if G.shape[0] != G.shape[1]:
        raise ValueError("graph must be square")
    L = default_num_levels(n, leaf_cap) if num_levels is None else int(num_levels)
    if L < 1:
        raise ValueError("num_levels must be >= 1")
    if parts is not None:
        parts = np.asarray(parts, dtype=np.int64)
        if parts.shape != (n,):
            raise ValueError(f"part vector has {parts.shape[0]} entries, graph has {n} vertices")
        if len(parts) and (parts.min() < 0 or parts.max() >= 2 ** (L - 1)):
            raise ValueError(f"part ids must lie in [0, {2 ** (L - 1)})")
        split = _split_parts(parts, L)
    elif coords is not None:
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != n:
            raise ValueError(f"{coords.shape[0]} coordinates for {n} vertices")
        geo = _split_geometric(coords)
        split = lambda verts, sub, node: geo(verts, sub)  # noqa: E731
    else:
        split = lambda verts, sub, node: _split_bfs(verts, sub)  # noqa: E731

    node_of = np.ones(n, dtype=np.int64)
    stack = [(1, np.arange(n))]
    while stack:
        node, verts = stack.pop()
        if node_level(node) == L:
            node_of[verts] = node
            continue
        if len(verts) == 0:
            continue
        sub = G[verts][:, verts]
        left = split(verts, sub, node)
        lab = _separator_from_split(sub, left)
        if parts is None and len(verts) > 2 and not ((lab == 0).any() and (lab == 1).any()):
            lab = _level_separator(sub)
        node_of[verts[lab == 2]] = node
        stack.append((2 * node + 1, verts[lab == 1]))
        stack.append((2 * node, verts[lab == 0]))
    return SeparatorTree(L, node_of, leaf_cap)


def read_part_vector(path, ncols=None) -> np.ndarray:
    """One integer leaf id per line."""
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                vals.append(int(s))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: expected an integer") from None
    out = np.asarray(vals, dtype=np.int64)
    if ncols is not None and len(out) != ncols:
        raise ValueError(f"{path}: {len(out)} part ids for {ncols} columns")
    return out


def read_coordinates(path, ncols=None) -> np.ndarray:
    """One line of ``d`` floats per column."""
    X = np.loadtxt(path, ndmin=2)
    if ncols is not None and X.shape[0] != ncols:
        raise ValueError(f"{path}: {X.shape[0]} coordinate lines for {ncols} columns")
    return X


# -- interfaces ---------------------------------------------------------------

_HASH_MUL = np.uint64(0x9E3779B97F4A7C15)


@dataclass
class ClusterHierarchy:
    """Interface partitions of every separator at every finer level.

    ``labels[node][lp]`` gives, for each vertex of ``separator(node)`` (in
    increasing vertex order), its interface index in the grouping used while
    levels ``>= lp`` are being eliminated, for ``level(node) < lp <= L``.
    ``labels[node][level(node)]`` is all zeros (the whole separator).
    Every grouping refines the next coarser one, so ``merge_map(node, lp)``
    (from grouping ``lp`` to ``lp - 1``) is well defined.
    """

    tree: SeparatorTree
    seps: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    touches: dict = field(default_factory=dict)

    @property
    def num_levels(self) -> int:
        return self.tree.num_levels

    def interfaces(self, node: int, lp: int) -> list[np.ndarray]:
        """Column sets of the interfaces of ``node`` under grouping ``lp``."""
        lab = self.labels[node][lp]
        verts = self.seps[node]
        k = lab.max() + 1 if len(lab) else 0
        order = np.argsort(lab, kind="stable")
        bounds = np.searchsorted(lab[order], np.arange(k + 1))
        return [verts[order[bounds[i] : bounds[i + 1]]] for i in range(k)]

    def merge_map(self, node: int, lp: int) -> np.ndarray:
        """Index of the grouping-``lp - 1`` interface containing each ``lp`` interface."""
        fine = self.labels[node][lp]
        coarse = self.labels[node][lp - 1]
        k = fine.max() + 1 if len(fine) else 0
        out = np.zeros(k, dtype=np.int64)
        out[fine] = coarse
        return out

    def initial_clusters(self) -> list[tuple[int, np.ndarray]]:
        """``(node, cols)`` for every leaf interior and finest interface."""
        L = self.num_levels
        out = []
        for node in range(1, 2**L):
            if node_level(node) == L:
                cols = self.seps.get(node, np.zeros(0, dtype=np.int64))
                out.append((node, cols))
            else:
                for cols in self.interfaces(node, L):
                    out.append((node, cols))
        return out


def infer_interfaces(tree: SeparatorTree, graph, seed: int = 0x5EED) -> ClusterHierarchy:
    """Split each separator into interfaces by the subdomains it touches.

    A separator vertex of a level-``l`` node is keyed, for each finer grouping
    ``lp``, by the set of level-``lp`` subdomains (subtrees rooted at level
    ``lp``) its neighbors belong to.  Separators between levels ``l`` and
    ``lp`` are not subdomains and are ignored.  Keys accumulate from coarse
    to fine so each grouping refines the previous one.
    """
    L = tree.num_levels
    G = sp.csr_matrix(graph)
    n = tree.nvertices
    rng = np.random.default_rng(seed)
    salt = rng.integers(1, 2**63, size=2**L, dtype=np.int64).astype(np.uint64) | np.uint64(1)
    node_of = tree.node_of
    lev = tree.level_of_vertex()
    order = np.argsort(node_of, kind="stable")
    bounds = np.searchsorted(node_of[order], np.arange(1, 2**L + 1))
    H = ClusterHierarchy(tree)
    coo = G.tocoo()
    rows, cols = coo.row, coo.col
    for node in range(1, 2**L):
        verts = order[bounds[node - 1] : bounds[node]]
        H.seps[node] = verts
        ln = node_level(node)
        if ln == L:
            continue
        H.labels[node] = {ln: np.zeros(len(verts), dtype=np.int64)}
        H.touches[node] = {}
        if not len(verts):
            for lp in range(ln + 1, L + 1):
                H.labels[node][lp] = np.zeros(0, dtype=np.int64)
            continue
        sub = G[verts]
        vrow = np.repeat(np.arange(len(verts)), np.diff(sub.indptr))
        w = sub.indices
        deeper = lev[w] > ln
        vrow, w = vrow[deeper], w[deeper]
        wl, wn = lev[w], node_of[w]
        prev = H.labels[node][ln]
        for lp in range(ln + 1, L + 1):
            keep = wl >= lp
            dom = ancestor_at(wn[keep], wl[keep], lp)
            vr = vrow[keep]
            pairs = np.unique(np.stack([vr, dom]), axis=1) if len(vr) else np.zeros((2, 0), np.int64)
            key = np.zeros(len(verts), dtype=np.uint64)
            np.add.at(key, pairs[0], salt[pairs[1]])
            key = key * _HASH_MUL
            _, lab = np.unique(np.stack([prev.astype(np.uint64), key]), axis=1, return_inverse=True)
            lab = lab.ravel().astype(np.int64)
            H.labels[node][lp] = lab
            doms = {}
            for v, d in zip(*pairs):
                doms.setdefault(int(lab[v]), set()).add(int(d))
            H.touches[node][lp] = doms
            prev = lab
    return H


def order_columns(hierarchy: ClusterHierarchy) -> np.ndarray:
    """Leaf interiors first, then separators by decreasing level, each grouped
    by its finest interfaces."""
    L = hierarchy.num_levels
    parts = []
    for node in range(2 ** (L - 1), 2**L):
        parts.append(hierarchy.seps.get(node, np.zeros(0, dtype=np.int64)))
    for lev in range(L - 1, 0, -1):
        for node in range(2 ** (lev - 1), 2**lev):
            parts.extend(hierarchy.interfaces(node, L))
    perm = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return perm.astype(np.int64)


# -- rows -------------------------------------------------------------------


@dataclass
class Matching:
    """``row_of_col[j]`` is the row matched to column ``j`` (``-1`` if none)."""

    row_of_col: np.ndarray
    col_of_row: np.ndarray

    @property
    def size(self) -> int:
        return int((self.row_of_col >= 0).sum())

    @property
    def unmatched_cols(self) -> np.ndarray:
        return np.nonzero(self.row_of_col < 0)[0]


@dataclass
class RowAssignment:
    """Owner cluster per row plus the matching used to seed it."""

    row_owner: np.ndarray
    matched_col: np.ndarray

    def counts(self, nclusters: int) -> np.ndarray:
        return np.bincount(self.row_owner, minlength=nclusters)


def match_rows(A) -> Matching:
    """Maximum-cardinality row/column matching preferring large ``|A_ij|``.

    A greedy pass over entries in decreasing magnitude seeds the matching;
    augmenting paths from every still-free column complete it.
    """
    A = sp.csc_matrix(A)
    m, n = A.shape
    coo = A.tocoo()
    order = np.lexsort((coo.col, coo.row, -np.abs(coo.data)))
    row_of_col = np.full(n, -1, dtype=np.int64)
    col_of_row = np.full(m, -1, dtype=np.int64)
    for r, c in zip(coo.row[order].tolist(), coo.col[order].tolist()):
        if row_of_col[c] < 0 and col_of_row[r] < 0:
            row_of_col[c] = r
            col_of_row[r] = c
    indptr, indices = A.indptr, A.indices
    stamp = np.zeros(m, dtype=np.int64)
    for j0 in np.nonzero(row_of_col < 0)[0].tolist():
        # iterative DFS for an augmenting path starting at column j0
        tag = j0 + 1
        path_cols = [j0]
        path_rows = []
        ptrs = [indptr[j0]]
        found = -1
        while path_cols:
            j = path_cols[-1]
            p = ptrs[-1]
            advanced = False
            while p < indptr[j + 1]:
                r = indices[p]
                p += 1
                if stamp[r] == tag:
                    continue
                stamp[r] = tag
                if col_of_row[r] < 0:
                    found = r
                    ptrs[-1] = p
                    advanced = True
                    break
                ptrs[-1] = p
                path_rows.append(r)
                path_cols.append(col_of_row[r])
                ptrs.append(indptr[col_of_row[r]])
                advanced = True
                break
            if found >= 0:
                break
            if not advanced:
                path_cols.pop()
                ptrs.pop()
                if path_rows:
                    path_rows.pop()
        if found < 0:
            continue
        # flip the path: path_cols[k] takes path_rows[k] (or found at the end)
        targets = path_rows + [found]
        for j, r in zip(path_cols, targets):
            row_of_col[j] = r
            col_of_row[r] = j
    if (row_of_col < 0).any():
        warnings.warn(
            f"structurally rank deficient: {int((row_of_col < 0).sum())} unmatched columns",
            RuntimeWarning,
            stacklevel=2,
        )
    return Matching(row_of_col, col_of_row)


def assign_rows(A, cluster_of_col, matching: Matching, zero_row_owner: int = 0) -> RowAssignment:
    """Give every row an owner cluster.

    Matched rows follow their column.  Other rows go to the cluster maximizing
    the sum of squared entries of the row over that cluster's columns, ties to
    the lowest cluster id.  Zero rows go to ``zero_row_owner``.
    """
    A = sp.csr_matrix(A)
    m = A.shape[0]
    cluster_of_col = np.asarray(cluster_of_col, dtype=np.int64)
    owner = np.full(m, -1, dtype=np.int64)
    matched = matching.col_of_row >= 0
    owner[matched] = cluster_of_col[matching.col_of_row[matched]]
    free = np.nonzero(~matched)[0]
    if len(free):
        sub = A[free].tocoo()
        k = cluster_of_col[sub.col]
        W = sp.coo_matrix((sub.data**2, (sub.row, k)), shape=(len(free), int(cluster_of_col.max()) + 1))
        W = W.tocsr()
        W.sum_duplicates()
        wc = W.tocoo()
        # sort by row, then weight descending, then cluster id ascending
        o = np.lexsort((wc.col, -wc.data, wc.row))
        r_sorted = wc.row[o]
        first = np.ones(len(o), dtype=bool)
        first[1:] = r_sorted[1:] != r_sorted[:-1]
        best = np.full(len(free), zero_row_owner, dtype=np.int64)
        pos = o[first]
        best[wc.row[pos]] = wc.col[pos]
        zero = np.ones(len(free), dtype=bool)
        zero[wc.row[wc.data > 0]] = False
        best[zero] = zero_row_owner
        owner[free] = best
    return RowAssignment(owner, matching.col_of_row.copy())
