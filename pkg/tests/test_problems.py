import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

import invariants
from spaqr.problems import (
    InvPoiSpec,
    _assemble,
    gen_invpoi,
    gen_invpoi_2d,
    gen_invpoi_3d,
    invpoi_residual,
    invpoi_values,
    jacobian_fd_check,
)


def _row_of(p, var):
    return int(np.nonzero(p.row_vars == var)[0][0])


def test_2d_counts_n4():
    A, c = gen_invpoi_2d(InvPoiSpec(dim=2, n=4, target_alpha=None))
    assert A.shape[1] == 16 and 16 <= A.shape[0] <= 41
    assert A.shape[0] / A.shape[1] <= 2.5625
    assert c.cols.shape == (16, 2) and c.rows.shape == (A.shape[0], 2)


def test_3d_counts_n2():
    A, c = gen_invpoi_3d(InvPoiSpec(dim=3, n=2, target_alpha=None))
    assert A.shape[1] == 8 and 8 <= A.shape[0] <= 35
    assert c.cols.shape == (8, 3)


def test_2d_diagonal_unit_z():
    p = gen_invpoi(InvPoiSpec(dim=2, n=4, region_side=4))
    e = 1 * 4 + 1  # interior node (1, 1)
    assert p.A[_row_of(p, e), e] == -4.0


def test_3d_diagonal_unit_z():
    p = gen_invpoi(InvPoiSpec(dim=3, n=4, region_side=4))
    e = 1 * 16 + 1 * 4 + 1
    assert p.A[_row_of(p, e), e] == -6.0


def test_constant_everywhere_drives_alpha_to_one():
    alphas = []
    for n in (4, 8, 16, 32, 64):
        p = gen_invpoi(InvPoiSpec(dim=2, n=n, region_side=n))
        N = n * n
        # every retained z-row touches the zero boundary
        zrows = p.row_vars[p.row_vars >= N] - N
        cell = np.stack(np.unravel_index(zrows, (n + 1, n + 1)), axis=1)
        assert np.all(np.any((cell == 0) | (cell == n), axis=1))
        alphas.append(p.alpha)
    assert all(a > b for a, b in zip(alphas, alphas[1:]))
    assert alphas[-1] < 1.07


def test_stencil_support():
    A, _ = gen_invpoi_3d(InvPoiSpec(dim=3, n=4, target_alpha=None, seed=3))
    p = gen_invpoi(InvPoiSpec(dim=3, n=4, target_alpha=None, seed=3))
    isu = p.row_vars < 64
    C = sp.csc_matrix(A)
    for e in range(64):
        rows = C.indices[C.indptr[e] : C.indptr[e + 1]]
        assert isu[rows].sum() <= 7 and (~isu[rows]).sum() <= 8


def test_fd_examples():
    assert jacobian_fd_check(InvPoiSpec(dim=2, n=4, target_alpha=None, seed=1)) <= 1e-6
    assert jacobian_fd_check(InvPoiSpec(dim=3, n=3, target_alpha=None, seed=2)) <= 1e-6


@pytest.mark.parametrize("dim, n", [(2, 5), (3, 3)])
@pytest.mark.parametrize("h", [1e-3, 0.5, 10.0])
def test_u_block_exact_for_any_step(dim, n, h):
    u, z = invpoi_values(InvPoiSpec(dim=dim, n=n, target_alpha=None, seed=4), 0)
    JT = _assemble(u, z).toarray()
    for k in range(u.size):
        up, um = u.copy(), u.copy()
        up.flat[k] += h
        um.flat[k] -= h
        fd = (invpoi_residual(up, z) - invpoi_residual(um, z)).ravel() / (2 * h)
        assert np.abs(fd - JT[k]).max() <= 1e-10


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fd_property(seed):
    invariants.check_generator_fd(np.random.default_rng(seed))


@pytest.mark.parametrize("dim, n", [(2, 3), (2, 9), (3, 2), (3, 5)])
def test_row_count_bounds_and_no_zero_rows(dim, n):
    for target in (None, 1.5, 2.0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p = gen_invpoi(InvPoiSpec(dim=dim, n=n, target_alpha=target))
        N = n**dim
        assert p.A.shape[1] == N and N <= p.A.shape[0] <= N + (n + 1) ** dim
        assert (np.diff(sp.csr_matrix(p.A).indptr) > 0).all()


@pytest.mark.parametrize("dim, n", [(2, 16), (3, 8)])
def test_alpha_monotone_in_region(dim, n):
    sides = [0, n // 4, n // 2, 3 * n // 4, n]
    alphas = [gen_invpoi(InvPoiSpec(dim=dim, n=n, region_side=s)).alpha for s in sides]
    assert all(a >= b for a, b in zip(alphas, alphas[1:])), alphas
    assert alphas[0] > alphas[-1]


def test_target_alpha_hit():
    p = gen_invpoi(InvPoiSpec(dim=2, n=64, target_alpha=2.0))
    assert abs(p.alpha - 2.0) < 0.05


def test_clamp_warns():
    with pytest.warns(RuntimeWarning, match="clamped"):
        p = gen_invpoi(InvPoiSpec(dim=2, n=4, target_alpha=1.01))
    assert p.region_side == 4
    with pytest.warns(RuntimeWarning, match="clamped"):
        gen_invpoi(InvPoiSpec(dim=2, n=4, target_alpha=5.0))


@pytest.mark.parametrize("zval", [1.0, 0.7])
def test_u_block_symmetric_for_constant_z(zval):
    n = 5
    u, _ = invpoi_values(InvPoiSpec(dim=2, n=n, target_alpha=None, seed=5), 0)
    z = np.full((n + 1, n + 1), zval)
    JT = _assemble(u, z).toarray()
    Ju = JT[: n * n].T  # J[eq, u]
    assert np.allclose(Ju, Ju.T, rtol=0, atol=1e-15)
    for i in range(n - 1):
        for j in range(n):
            e, f = i * n + j, (i + 1) * n + j
            assert Ju[e, f] == Ju[f, e] != 0


def test_deterministic():
    a = gen_invpoi(InvPoiSpec(dim=3, n=5, target_alpha=None, region_side=2, seed=9))
    b = gen_invpoi(InvPoiSpec(dim=3, n=5, target_alpha=None, region_side=2, seed=9))
    assert (a.A != b.A).nnz == 0
    c = gen_invpoi(InvPoiSpec(dim=3, n=5, target_alpha=None, region_side=2, seed=10))
    assert (a.A != c.A).nnz > 0


def test_spec_validation():
    with pytest.raises(ValueError):
        InvPoiSpec(dim=4)
    with pytest.raises(ValueError):
        InvPoiSpec(n=1)
    with pytest.raises(ValueError):
        gen_invpoi_2d(InvPoiSpec(dim=3, n=2))
