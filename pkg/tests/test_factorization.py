import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

import invariants
from spaqr.dense import SingularFrontError
from spaqr.factorization import (
    FORMAT_VERSION,
    PHASES,
    Factorization,
    FactorState,
    SolverConfig,
    TriangularTransform,
    _merge,
    factorize,
    factorize_separator,
    reassign_extra_rows,
    scale_interface,
    sparsify_interface,
    sparsify_interface_rows,
)
from spaqr.partition import RowAssignment, infer_interfaces, nested_dissection
from spaqr.problems import InvPoiSpec, gen_invpoi_2d, gen_invpoi_3d
from spaqr.solve import cgls, csne_solve
from spaqr.sparse import ata_graph, scale_columns


def make_state(A, init, owners, L=2, eps=1e-2, store_q=False):
    """Factor state with hand-picked clusters ``init = [(node, cols), ...]``."""
    A = sp.csc_matrix(np.asarray(A, dtype=float)) if not sp.issparse(A) else A
    n = A.shape[1]
    tree = nested_dissection(sp.csr_matrix((n, n)), L)
    H = infer_interfaces(tree, sp.csr_matrix((n, n)))
    m = A.shape[0]
    ra = RowAssignment(np.asarray(owners, dtype=np.int64), np.full(m, -1, dtype=np.int64))
    cfg = SolverConfig(eps=eps, num_levels=L, store_q=store_q)
    init = [(node, np.asarray(cols, dtype=np.int64)) for node, cols in init]
    return FactorState(A, H, ra, cfg, clusters_init=init)


def dense_r(A):
    R = np.linalg.qr(A, mode="r")
    return R * np.sign(np.diag(R))[:, None]


# -- factorize_separator ----------------------------------------------------


def test_leaf_front_5x3():
    B = np.random.default_rng(0).standard_normal((5, 3))
    st_ = make_state(B, [(1, [0, 1, 2])], [0] * 5, L=1)
    slots, E, offs, owners = factorize_separator(st_, 0)
    t = st_.transforms[-1]
    assert isinstance(t, TriangularTransform)
    assert t.R.shape == (3, 3) and len(slots) == 2 and E.shape == (2, 0)
    assert np.allclose(t.R, dense_r(B), atol=1e-13)
    assert not st_.clusters and owners == []


def _two_interior_toy():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=4, target_alpha=None, seed=1))
    As, _ = scale_columns(A)
    F = factorize(A, SolverConfig(eps=0.0, num_levels=2), coords=c.cols)
    G = ata_graph(As)
    t = nested_dissection(G, 2, coords=c.cols)
    return As, F, t


def test_two_interiors_no_fill_direct():
    As, F, t = _two_interior_toy()
    a, b = set(t.separator(2).tolist()), set(t.separator(3).tolist())
    for tr in F.transforms:
        cols = set(tr.cols.tolist())
        if cols <= a:
            assert not (set(tr.ncols.tolist()) & b)
        if cols <= b:
            assert not (set(tr.ncols.tolist()) & a)
    # dense QR oracle on the permuted matrix: same R, and its interior block is zero
    perm = np.concatenate([tr.cols for tr in F.transforms])
    n = As.shape[1]
    W = np.zeros((n, n))
    pos = np.empty(n, dtype=np.int64)
    pos[perm] = np.arange(n)
    for tr in F.transforms:
        W[np.ix_(pos[tr.cols], pos[tr.cols])] = tr.R
        if len(tr.ncols):
            W[np.ix_(pos[tr.cols], pos[tr.ncols])] = tr.Rn
    R = dense_r(As.toarray()[:, perm])
    assert np.abs(W - R).max() <= 1e-12 * np.abs(R).max()
    ia = pos[sorted(a)]
    ib = pos[sorted(b)]
    assert np.abs(R[np.ix_(ia, ib)]).max() <= 1e-13


def test_direct_invpoi_n8_matches_dense_lstsq():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=8, target_alpha=None, seed=2))
    rng = np.random.default_rng(3)
    b = rng.standard_normal(A.shape[0])
    x0, *_ = np.linalg.lstsq(A.toarray(), b, rcond=None)
    r0 = np.linalg.norm(A @ x0 - b)
    for L in (1, 3):
        F = factorize(A, SolverConfig(eps=0.0, num_levels=L), coords=c.cols)
        x, _ = csne_solve(A, F, b)
        assert abs(np.linalg.norm(A @ x - b) - r0) <= 1e-10 * r0
        assert np.linalg.norm(x - x0) <= 1e-10 * np.linalg.norm(x0)


def test_singular_front_reports_cluster_and_level():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((20, 6))
    A[:, 3] = A[:, 2]
    with pytest.raises(SingularFrontError) as ei:
        factorize(sp.csc_matrix(A), SolverConfig(eps=0.0, num_levels=1))
    assert ei.value.cluster is not None and ei.value.level == 1
    assert "cluster" in str(ei.value) and "level 1" in str(ei.value)


def test_too_few_rows():
    with pytest.raises(ValueError, match="at least as many rows"):
        factorize(sp.csc_matrix(np.ones((2, 3))))


# -- reassign_extra_rows ----------------------------------------------------


def test_reassign_single_neighbor():
    rows = np.random.default_rng(5).standard_normal((4, 3))
    assert reassign_extra_rows(rows, {7: (0, 3)}).tolist() == [7] * 4


def test_reassign_9_vs_4():
    rows = np.array([[3.0, 0.0, 2.0]])
    assert reassign_extra_rows(rows, {1: (0, 2), 2: (2, 3)}).tolist() == [1]


def test_reassign_ties_and_fallback():
    rows = np.array([[1.0, 1.0], [0.0, 0.0]])
    out = reassign_extra_rows(rows, {3: (0, 1), 5: (1, 2)}, fallback=9)
    assert out.tolist() == [3, 9]
    # candidates restrict the owners
    out = reassign_extra_rows(np.array([[5.0, 1.0]]), {3: (0, 1), 5: (1, 2)}, candidates=[5])
    assert out.tolist() == [5]


@settings(max_examples=200, deadline=None)
@given(k=st.integers(1, 6), nrows=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_reassign_bruteforce(k, nrows, seed):
    rng = np.random.default_rng(seed)
    widths = rng.integers(1, 5, size=k)
    ids = sorted(rng.choice(100, size=k, replace=False).tolist())
    layout, o = {}, 0
    for cid, w in zip(ids, widths):
        layout[cid] = (o, o + int(w))
        o += int(w)
    rows = rng.standard_normal((nrows, o)) * (rng.random((nrows, o)) < 0.5)
    got = reassign_extra_rows(rows, layout, fallback=-5)
    for r in range(nrows):
        best, bw = -5, 0.0
        for cid in ids:
            a, b = layout[cid]
            w = float(np.sum(rows[r, a:b] ** 2))
            if w > bw:
                best, bw = cid, w
        assert got[r] == best


# -- scale_interface --------------------------------------------------------


def test_scale_already_identity():
    st_ = make_state(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), [(1, [0, 1])], [0, 0, 0], L=1)
    scale_interface(st_, 0)
    assert np.allclose(st_.transforms[-1].R, np.eye(2), atol=1e-15)
    assert np.array_equal(st_.clusters[0].blk[0], np.eye(3, 2))


def test_scale_2x1():
    st_ = make_state(np.array([[2.0], [0.0]]), [(1, [0])], [0, 0], L=1)
    scale_interface(st_, 0)
    assert st_.transforms[-1].R.tolist() == [[2.0]]
    assert st_.clusters[0].blk[0].tolist() == [[1.0], [0.0]]


def test_scale_random_10x4_with_neighbors():
    rng = np.random.default_rng(6)
    # interface cluster on columns 0..3 (node 1), neighbor leaf on 4..6 (node 2)
    A = np.zeros((14, 7))
    A[:10, :4] = rng.standard_normal((10, 4))
    A[:10, 4:] = rng.standard_normal((10, 3)) * (rng.random((10, 3)) < 0.5)
    A[10:, 4:] = rng.standard_normal((4, 3))
    A[10:, :4] = rng.standard_normal((4, 4)) * (rng.random((4, 4)) < 0.4)
    st_ = make_state(A, [(2, [4, 5, 6]), (1, [0, 1, 2, 3])], [1] * 10 + [0] * 4, store_q=True)
    D0 = st_.dense_matrix()
    scale_interface(st_, 1)
    p = st_.clusters[1]
    assert np.abs(p.blk[1] - np.eye(10, 4)).max() <= 1e-13
    # W-consistency: new matrix = U^T A R^{-1} on the interface columns
    t = st_.transforms[-1]
    D1 = st_.dense_matrix()
    lhs = D1.copy()
    lhs[:, [0, 1, 2, 3]] = D1[:, [0, 1, 2, 3]] @ t.R
    for tr in st_.q_transforms:
        for j in range(7):
            tr.apply(lhs[:, j])
    assert np.abs(lhs - D0).max() <= 1e-12 * np.abs(D0).max()


def test_scale_rank_deficient():
    st_ = make_state(np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]), [(1, [0, 1])], [0] * 3, L=1)
    with pytest.raises(SingularFrontError, match="cluster 0"):
        scale_interface(st_, 0)


# -- sparsification steps ---------------------------------------------------


def _interface_state(top, low, coupling_rows=None, eps=1e-2):
    """Interface p (node 1) of ``c`` columns with rows ``[top; low]`` on the
    neighbor columns, diagonal block already ``[I; 0]``."""
    c = top.shape[0]
    w = top.shape[1]
    m2 = low.shape[0]
    r_n = coupling_rows.shape[0] if coupling_rows is not None else 0
    A = np.zeros((c + m2 + w + r_n, c + w))
    A[:c, :c] = np.eye(c)
    A[:c, c:] = top
    A[c : c + m2, c:] = low
    A[c + m2 : c + m2 + w, c:] = np.eye(w)
    if r_n:
        A[c + m2 + w :, :c] = coupling_rows[:, :c]
        A[c + m2 + w :, c:] = coupling_rows[:, c:]
    owners = [1] * (c + m2) + [0] * (w + r_n)
    return make_state(A, [(2, list(range(c, c + w))), (1, list(range(c)))], owners, eps=eps)


def test_step1_zero_block_drops_all():
    st_ = _interface_state(np.ones((2, 3)), np.zeros((3, 3)))
    st_.clusters[1].rows[2:]  # p2 rows
    assert sparsify_interface_rows(st_, 1, 1e-2) == 3
    p = st_.clusters[1]
    assert p.r == p.c == 2 and p.r / p.c == 1.0


def test_step1_eps0_full_rank_keeps_rows():
    rng = np.random.default_rng(7)
    st_ = _interface_state(rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))
    assert sparsify_interface_rows(st_, 1, 0.0) == 0
    assert st_.clusters[1].r == 5


def test_step1_rank_one_svd_oracle():
    rng = np.random.default_rng(8)
    low = np.outer(rng.standard_normal(4), rng.standard_normal(5))
    assert np.linalg.matrix_rank(low, tol=1e-8 * np.linalg.norm(low, 2)) == 1
    st_ = _interface_state(rng.standard_normal((2, 5)), low)
    dropped = sparsify_interface_rows(st_, 1, 1e-8)
    assert dropped == 3 and st_.clusters[1].r == 3
    assert len(np.concatenate(st_.dropped)) == 3


def test_step2_no_coupling_all_fine():
    st_ = _interface_state(np.zeros((3, 2)), np.zeros((0, 2)))
    st_.clusters[1].blk.pop(0, None)
    st_.colnb[0].discard(1)
    assert sparsify_interface(st_, 1, 1e-2) == 3
    assert st_.clusters[1].c == 0
    assert (st_.row_of_col[:3] >= 0).all()


def test_step2_eps0_generic_keeps_all():
    rng = np.random.default_rng(9)
    st_ = _interface_state(rng.standard_normal((3, 4)), np.zeros((0, 4)), rng.standard_normal((5, 7)), eps=0.0)
    assert sparsify_interface(st_, 1, 0.0) == 0
    assert st_.clusters[1].c == 3


def test_step2_rank_k_coupling_svd_oracle():
    rng = np.random.default_rng(10)
    c, k = 6, 2
    U = rng.standard_normal((c, k))
    top = U @ rng.standard_normal((k, 4))
    coup = np.zeros((5, c + 4))
    coup[:, :c] = rng.standard_normal((5, k)) @ U.T
    st_ = _interface_state(top, np.zeros((0, 4)), coup)
    p = st_.clusters[1]
    Anp = np.vstack([st_.clusters[i].blk[1] for i in st_.colnb[1] if i != 1])
    B = np.hstack([Anp.T, p.blk[0][:c]])
    s = np.linalg.svd(B, compute_uv=False)
    oracle = int((s > 1e-10 * s[0]).sum())
    assert oracle == k
    nfine = sparsify_interface(st_, 1, 1e-10)
    assert st_.clusters[1].c == oracle and nfine == c - oracle


# -- merge ------------------------------------------------------------------


def test_merge_3_plus_4():
    rng = np.random.default_rng(11)
    A = sp.random(20, 10, density=0.3, random_state=rng).toarray() + np.eye(20, 10)
    owners = [0] * 4 + [1] * 6 + [2] * 10
    st_ = make_state(A, [(2, [7, 8, 9]), (1, [0, 1, 2]), (1, [3, 4, 5, 6])], owners)
    D0 = st_.dense_matrix()
    r1, r2 = set(st_.clusters[1].rows.tolist()), set(st_.clusters[2].rows.tolist())
    mid = _merge(st_, [1, 2])
    m = st_.clusters[mid]
    assert m.c == 7 and set(m.rows.tolist()) == r1 | r2 and len(m.rows) == len(r1) + len(r2)
    assert np.array_equal(st_.dense_matrix(), D0)
    _check_neighbor_sets(st_)


def _check_neighbor_sets(state):
    D = state.dense_matrix()
    for i, cl in state.clusters.items():
        for j, cj in state.clusters.items():
            hit = bool(D[np.ix_(cl.rows, cj.cols)].any()) if cl.r and cj.c else False
            assert (j in cl.blk) == hit, (i, j)
            assert (i in state.colnb[j]) == hit


def test_neighbor_sets_after_every_merge():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=16, target_alpha=2.0))
    seen = []

    def obs(event, lev, state, cid):
        if event == "post_merge":
            _check_neighbor_sets(state)
            seen.append(lev)

    factorize(A, SolverConfig(eps=1e-2, num_levels=4, skip_levels=1), coords=c.cols, observer=obs)
    assert seen == [4, 3, 2, 1]


# -- driver -----------------------------------------------------------------


def test_identity():
    F = factorize(sp.eye(30, format="csc"), SolverConfig(num_levels=3))
    y = np.random.default_rng(12).standard_normal(30)
    assert np.allclose(F.solve_w(y), y, rtol=0, atol=1e-15)
    assert F.n_dropped == 0


def test_eps0_random_200x120_matches_lstsq():
    rng = np.random.default_rng(13)
    A = invariants.random_full_rank(rng, 200, 120, density=0.04)
    b = rng.standard_normal(200)
    x0, *_ = np.linalg.lstsq(A.toarray(), b, rcond=None)
    F = factorize(A, SolverConfig(eps=0.0, num_levels=3))
    x, _ = csne_solve(A, F, b)
    assert np.linalg.norm(x - x0) <= 1e-10 * np.linalg.norm(x0)


def test_stats_shape():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=32, target_alpha=2.0))
    F = factorize(A, SolverConfig(skip_levels=1), coords=c.cols)
    assert [s["level"] for s in F.stats] == list(range(F.config.num_levels or 4, 0, -1))
    tot = 0.0
    for s in F.stats:
        assert set(s["times"]) == set(PHASES) and all(v >= 0 for v in s["times"].values())
        tot += sum(s["times"].values())
    assert tot <= F.timings["factor"] * 1.02
    assert any(s["sparsified"] for s in F.stats)
    assert F.top_separator[1] > 0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_w_roundtrip(seed):
    invariants.check_w_roundtrip(np.random.default_rng(seed))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_tree_disjointness(seed):
    invariants.check_tree_disjointness(np.random.default_rng(seed))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fill_locality(seed):
    invariants.check_fill_locality(np.random.default_rng(seed))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_row_conservation(seed):
    invariants.check_row_conservation(np.random.default_rng(seed))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_q_orthogonal(seed):
    rng = np.random.default_rng(seed)
    A, F = invariants._factor(rng, store_q=True)
    y = rng.standard_normal(A.shape[0])
    for tr in (False, True):
        z = F.apply_q(F.apply_q(y, transpose=tr), transpose=not tr)
        assert np.linalg.norm(z - y) <= 1e-11 * np.linalg.norm(y)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_direct_mode_equivalence(seed):
    rng = np.random.default_rng(seed)
    A = invariants.random_full_rank(rng, 100, 60, density=float(rng.uniform(0.03, 0.1)))
    F = factorize(A, SolverConfig(eps=0.0, num_levels=int(rng.integers(1, 4)), store_q=True))
    assert F.n_dropped == 0
    # Q^T A M v puts v on the unit rows and zero elsewhere
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(60)
        z = F.apply_q(A @ F.precond(v), transpose=True)
        e = np.zeros(100)
        e[F.row_of_col] = v
        worst = max(worst, np.abs(z - e).max() / np.abs(v).max())
    assert worst <= 1e-10


def test_aspect_ratio_control():
    for gen, n in ((gen_invpoi_2d, 64), (gen_invpoi_3d, 12)):
        A, c = gen(InvPoiSpec(dim=2 if gen is gen_invpoi_2d else 3, n=n, target_alpha=2.0))
        alpha = A.shape[0] / A.shape[1]
        bad = []
        hits = []

        def obs(event, lev, state, cid):
            if event == "post_step1":
                hits.append(lev)
                for cl in state.clusters.values():
                    if cl.c and cl.r > max(cl.c, 3 * alpha * cl.c):
                        bad.append((lev, cl.r, cl.c))

        factorize(A, SolverConfig(eps=1e-2), coords=c.cols, observer=obs)
        assert hits and not bad, bad[:3]


def test_monotone_accuracy():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=64, target_alpha=2.0))
    b = np.random.default_rng(14).standard_normal(A.shape[0])
    its = []
    for eps in (1e-1, 1e-2, 1e-4):
        F = factorize(A, SolverConfig(eps=eps), coords=c.cols)
        _, rep = cgls(A, F, b)
        assert rep.converged
        its.append(rep.iterations)
    assert its[0] >= its[1] >= its[2]


def test_invpoi_n128_iterations():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=128, target_alpha=2.0))
    b = np.random.default_rng(15).standard_normal(A.shape[0])
    F = factorize(A, SolverConfig(eps=1e-2), coords=c.cols)
    _, rep = cgls(A, F, b, tol=1e-12)
    assert rep.converged and rep.iterations <= 15


# -- persistence ------------------------------------------------------------


def test_dump_load_roundtrip(tmp_path):
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=32, target_alpha=2.0))
    F = factorize(A, SolverConfig(eps=1e-2, skip_levels=1), coords=c.cols)
    assert any(not isinstance(t, TriangularTransform) for t in F.transforms)
    F.dump(tmp_path / "f.npz")
    G = Factorization.load(tmp_path / "f.npz")
    y = np.random.default_rng(16).standard_normal(A.shape[1])
    assert np.array_equal(F.precond(y), G.precond(y))
    assert np.array_equal(F.precond_t(y), G.precond_t(y))
    assert G.nnz_w == F.nnz_w and np.array_equal(G.dropped_rows, F.dropped_rows)
    with np.load(tmp_path / "f.npz") as z:
        assert z["data"].dtype == np.dtype("<f8") and z["cols"].dtype == np.dtype("<i8")
        assert int(z["version"][0]) == FORMAT_VERSION


def test_load_rejects_other_versions(tmp_path):
    F = factorize(sp.eye(4, format="csc"), SolverConfig(num_levels=1))
    F.dump(tmp_path / "f.npz")
    with np.load(tmp_path / "f.npz") as z:
        d = dict(z)
    d["version"] = np.array([FORMAT_VERSION + 1], "<i8")
    np.savez(tmp_path / "g.npz", **d)
    with pytest.raises(ValueError, match="version"):
        Factorization.load(tmp_path / "g.npz")


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(eps=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(skip_levels=-1)
    with pytest.raises(ValueError):
        SolverConfig(cpqr_method="magic")
