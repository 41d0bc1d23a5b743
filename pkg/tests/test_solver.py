import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from tdnns_piezo import forms as fm
from tdnns_piezo import solver as sv


def laplacian(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def saddle(rng, n=30, m=10, scale=1e-11):
    """[[-S, B], [B^T, 0]] with a tiny SPD compliance block, like the mixed systems."""
    G = rng.standard_normal((n, n))
    S = scale * (G @ G.T + n * np.eye(n))
    B = rng.standard_normal((n, m))
    return sp.csr_matrix(np.block([[-S, B], [B.T, np.zeros((m, m))]]))


def test_identity_factors_trivially():
    fac = sv.factor(sp.eye(2))
    assert np.array_equal(fac.solve(np.array([3.0, -4.0])), [3.0, -4.0])
    assert fac.last_residual == 0.0


def test_laplacian_manufactured():
    A = laplacian(100)
    x = sv.solve(A, A @ np.ones(100))
    assert np.abs(x - 1).max() < 1e-12


def test_saddle_point_solution_and_residual(rng):
    A = saddle(rng)
    # unknowns drawn in equilibrated units, so that A @ x0 does not round the S-block away
    d = sv.saddle_scaling(A)
    x0 = d * rng.standard_normal(A.shape[0])
    fac = sv.factor(A)
    x = fac.solve(A @ x0)
    assert fac.last_residual <= 1e-10
    assert np.abs((x - x0) / d).max() < 1e-12 * np.abs(x0 / d).max()


@given(st.integers(0, 2**32 - 1), st.integers(5, 40))
def test_random_sparse_symmetric_solves(seed, n):
    rng = np.random.default_rng(seed)
    R = sp.random(n, n, density=0.2, random_state=seed)
    A = sp.csr_matrix(R + R.T + sp.diags(rng.uniform(1, 2, n) * (1 + abs(R).sum(axis=1).A.ravel() * 2)))
    b = rng.standard_normal(n)
    fac = sv.factor(A)
    x = fac.solve(b)
    assert fac.residual(x, b) <= 1e-10
    assert np.allclose(x, np.linalg.solve(A.toarray(), b), rtol=1e-10, atol=1e-12)


def test_factor_reuse_matches_fresh_factorizations(rng):
    A = saddle(rng)
    b1, b2 = rng.standard_normal((2, A.shape[0]))
    fac = sv.factor(A)
    y1, y2 = fac.solve(b1), fac.solve(b2)
    z1, z2 = sv.solve(A, b1), sv.solve(A, b2)
    scale = np.abs(z1).max() + np.abs(z2).max()
    assert np.abs(y1 - z1).max() <= 1e-12 * scale
    assert np.abs(y2 - z2).max() <= 1e-12 * scale
    Y = fac.solve(np.column_stack([b1, b2]))
    assert np.abs(Y[:, 0] - z1).max() <= 1e-12 * scale


def test_zero_rhs_gives_zero(rng):
    assert not np.any(sv.factor(saddle(rng)).solve(np.zeros(40)))


def test_empty_row_is_reported_with_its_index():
    A = laplacian(10).tolil()
    A[4, :] = 0
    A[:, 4] = 0
    with pytest.raises(sv.SingularMatrixError) as err:
        sv.factor(A.tocsr())
    assert err.value.index == 4
    assert "4" in str(err.value)


def test_missing_boundary_condition_is_singular():
    # pure Neumann Laplacian: constants are in the kernel
    A = laplacian(50).tolil()
    A[0, 0] = A[-1, -1] = 1.0
    with pytest.raises(sv.SingularMatrixError, match="singular"):
        sv.factor(A.tocsr())


def test_rejects_non_square_and_empty():
    with pytest.raises(sv.SolverError):
        sv.factor(sp.csr_matrix((3, 2)))
    with pytest.raises(sv.SolverError):
        sv.factor(sp.csr_matrix((0, 0)))
    with pytest.raises(sv.SolverError, match="scaling"):
        sv.factor(sp.eye(3), scaling="jacobi")


def test_residual_bound_is_enforced(rng):
    fac = sv.factor(saddle(rng))
    fac.refine_steps = 0
    with pytest.raises(sv.SolverError, match="residual"):
        fac.solve(rng.standard_normal(40), tol=1e-30)


def test_saddle_scaling_units():
    A = sp.csr_matrix(np.array([[4e-12, 0, 2.0], [0, 9e-12, 3.0], [2.0, 3.0, 0.0]]))
    d = sv.saddle_scaling(A)
    assert np.allclose(d[:2], [1 / 2e-6, 1 / 3e-6])
    assert np.isclose(np.abs(d[:2] * A.toarray()[:2, 2]).max() * d[2], 1.0)


def test_as_csr_sorts_and_sums_duplicates():
    A = sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 1], [1, 1, 0])), shape=(2, 2))
    C = sv.as_csr(A)
    assert C.nnz == 2 and C[0, 1] == 3.0
    assert sv.is_structurally_symmetric(C)
    assert not sv.is_structurally_symmetric(sp.csr_matrix(np.triu(np.ones((3, 3)))))
    assert sv.symmetry_error(C) == pytest.approx(0.0)
    assert sv.symmetry_error(sp.csr_matrix((2, 2))) == 0.0


def test_matrix_dump_round_trip(tmp_path, rng):
    A = sp.random(20, 20, density=0.3, random_state=3, format="csr")
    A.data = rng.standard_normal(A.nnz) * 10.0 ** rng.integers(-12, 12, A.nnz)
    path = tmp_path / "A.txt"
    sv.dump_matrix(A, path)
    first = path.read_text().splitlines()[0]
    assert first == f"% 20 20 {A.nnz}"
    B = sv.load_matrix(path)
    assert (A != B).nnz == 0


# -- static condensation -----------------------------------------------------------

def element_blocks(rng, nT=4, nloc=9):
    G = rng.standard_normal((nT, nloc, nloc))
    K = G + G.transpose(0, 2, 1) + 3 * nloc * np.eye(nloc)
    return K, rng.standard_normal((nT, nloc))


def test_condense_without_interior_is_identity(rng):
    K, f = element_blocks(rng)
    Kc, fc, c = sv.static_condense(K, f, [])
    assert np.array_equal(Kc, K) and np.array_equal(fc, f)
    assert c.Kinv_Kib.shape == (4, 0, 9)


def test_condense_matches_dense_schur_complement(rng):
    K, f = element_blocks(rng)
    ii, bb = [2, 5, 7], [0, 1, 3, 4, 6, 8]
    Kc, fc, c = sv.static_condense(K, f, ii)
    xs = np.linalg.solve(K, f[:, :, None])[:, :, 0]
    rec = c.recover(xs[:, bb])
    for t in range(len(K)):
        Kii = K[t][np.ix_(ii, ii)]
        S = K[t][np.ix_(bb, bb)] - K[t][np.ix_(bb, ii)] @ np.linalg.solve(Kii, K[t][np.ix_(ii, bb)])
        g = f[t][bb] - K[t][np.ix_(bb, ii)] @ np.linalg.solve(Kii, f[t][ii])
        assert np.allclose(Kc[t][np.ix_(bb, bb)], S, rtol=1e-13, atol=1e-13)
        assert np.allclose(fc[t][bb], g, rtol=1e-13, atol=1e-13)
        assert not np.any(Kc[t][ii]) and not np.any(Kc[t][:, ii]) and not np.any(fc[t][ii])
        # recovery reproduces the interior part of the full element solve
        assert np.allclose(rec[t], xs[t][ii], rtol=1e-12)


def test_condense_handles_mixed_unit_saddle_blocks(rng):
    # interior block [[-S, B], [B^T, 0]] with S ~ 1e-11: badly scaled but regular
    A = saddle(rng, n=6, m=3).toarray()
    K = np.zeros((1, 11, 11))
    K[0, :9, :9] = A
    K[0, 9:, 9:] = np.eye(2)
    C = rng.standard_normal((9, 2)) * 1e-6
    K[0, :9, 9:] = C
    K[0, 9:, :9] = C.T
    Kc, _, _ = sv.static_condense(K, np.zeros((1, 11)), np.arange(9))
    assert np.all(np.isfinite(Kc))


def test_singular_interior_block_names_the_element(rng):
    K, f = element_blocks(rng)
    K[3, 2, :] = K[3, :, 2] = 0.0
    K[3, 5, :] = K[3, :, 5] = 0.0
    with pytest.raises(sv.SolverError, match="element 3"):
        sv.static_condense(K, f, [2, 5])


def test_condensed_unknowns_strictly_fewer_for_k2(beam):
    full = fm.make_spaces(beam, "v1", 2, 3)
    assert len(fm.interior_positions(full)) > 0
    assert len(fm.interior_positions(fm.make_spaces(beam, "primal", 2))) == 0


def test_assembled_bimorph_residual_audit(beam, pzt5_2d):
    loads = fm.LoadSpec(phi0={2: 75.0, 3: 75.0, 4: 0.0})
    for condense in (False, True):
        s = fm.assemble(beam, fm.make_spaces(beam, "v1", 1, 2), pzt5_2d, loads, condense=condense)
        _, fac = sv.solve_system(s)
        assert fac.last_residual <= 1e-10
