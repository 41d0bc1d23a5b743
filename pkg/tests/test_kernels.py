import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdnns_piezo import _kernels_py, kernels

try:
    from tdnns_piezo import _kernels as compiled
except ImportError:  # pragma: no cover - depends on the build
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def reference_bilinear(Bi, w, M, Bj):
    nT = Bi.shape[0]
    out = np.zeros((nT, Bi.shape[2], Bj.shape[2]))
    for t in range(nT):
        for q in range(Bi.shape[1]):
            out[t] += w[t, q] * Bi[t, q] @ M[t] @ Bj[t, q].T
    return out


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 7), st.integers(1, 9),
       st.integers(1, 9), st.sampled_from([(1, 1), (2, 2), (3, 3), (3, 2), (2, 3)]))
def test_python_bilinear_matches_loops(seed, nT, nq, ni, nj, comps):
    rng = np.random.default_rng(seed)
    ci, cj = comps
    Bi = rng.standard_normal((nT, nq, ni, ci))
    Bj = rng.standard_normal((nT, nq, nj, cj))
    w = rng.uniform(0, 1, (nT, nq))
    M = rng.standard_normal((nT, ci, cj))
    ref = reference_bilinear(Bi, w, M, Bj)
    out = kernels.element_bilinear(Bi, w, M, Bj, impl=_kernels_py)
    assert np.allclose(out, ref, rtol=1e-13, atol=1e-13 * np.abs(ref).max())


@needs_compiled
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 7), st.integers(1, 9),
       st.integers(1, 9), st.sampled_from([(1, 1), (2, 2), (3, 3), (3, 2), (2, 3)]))
def test_compiled_bilinear_equals_python(seed, nT, nq, ni, nj, comps):
    rng = np.random.default_rng(seed)
    ci, cj = comps
    Bi = rng.standard_normal((nT, nq, ni, ci))
    Bj = rng.standard_normal((nT, nq, nj, cj))
    w = rng.uniform(0, 1, (nT, nq))
    w[:, 0] = 0.0  # skipped quadrature points
    M = rng.standard_normal((ci, cj))
    a = kernels.element_bilinear(Bi, w, M, Bj, impl=compiled)
    b = kernels.element_bilinear(Bi, w, M, Bj, impl=_kernels_py)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13 * max(np.abs(b).max(), 1e-300))


def random_scatter(rng, nT, ni, nj, n_rows, n_cols):
    rows = rng.integers(-1, n_rows, (nT, ni))
    cols = rng.integers(-1, n_cols, (nT, nj))
    return rows, cols, rng.standard_normal((nT, ni, nj))


def dense_scatter(rows, cols, local, shape):
    A = np.zeros(shape)
    for t in range(len(local)):
        for i, r in enumerate(rows[t]):
            for j, c in enumerate(cols[t]):
                if r >= 0 and c >= 0:
                    A[r, c] += local[t, i, j]
    return A


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 6), st.integers(1, 6))
def test_scatter_sums_duplicates_and_drops_negatives(seed, nT, ni, nj):
    rng = np.random.default_rng(seed)
    shape = (12, 9)
    rows, cols, local = random_scatter(rng, nT, ni, nj, *shape)
    ref = dense_scatter(rows, cols, local, shape)
    impls = [_kernels_py] + ([compiled] if compiled is not None else [])
    for impl in impls:
        A = kernels.scatter(rows, cols, local, shape, impl=impl)
        assert A.has_sorted_indices
        assert np.allclose(A.toarray(), ref, rtol=1e-14, atol=1e-14)
        assert A.nnz == len(np.unique(A.indices + shape[1] * np.repeat(np.arange(12), np.diff(A.indptr))))


@needs_compiled
def test_compiled_scatter_has_the_same_pattern(rng):
    rows, cols, local = random_scatter(rng, 200, 9, 9, 150, 150)
    a = kernels.scatter(rows, cols, local, (150, 150), impl=compiled)
    b = kernels.scatter(rows, cols, local, (150, 150), impl=_kernels_py)
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    assert np.allclose(a.data, b.data, rtol=1e-14, atol=1e-14)


def test_scatter_of_nothing():
    A = kernels.scatter(np.zeros((0, 3), int), np.zeros((0, 3), int), np.zeros((0, 3, 3)), (4, 4))
    assert A.shape == (4, 4) and A.nnz == 0


def _backend(env):
    code = "import tdnns_piezo.kernels as k; print(k.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                          check=True).stdout.strip()


def test_pure_fallback_is_selected_by_environment():
    env = dict(os.environ, TDNNS_PIEZO_PURE="1")
    assert _backend(env) == "python"
    env.pop("TDNNS_PIEZO_PURE")
    assert _backend(env) == ("cython" if compiled is not None else "python")


def test_pure_backend_solves_the_same_system(tmp_path):
    code = (
        "import numpy as np\n"
        "from tdnns_piezo import mesh as msh, material as mat, forms as fm\n"
        "from tdnns_piezo.driver import solve_beam\n"
        "m = msh.structured_beam_mesh(0.1, [5e-4, 5e-4], 8, 1)\n"
        "s = solve_beam(m, 'v2', 2, None, mat.reduce_to_plane(mat.pzt5()),\n"
        "               fm.LoadSpec(phi0={2: 75.0, 3: 75.0, 4: 0.0}))\n"
        "np.save(%r, s.fields.x)\n"
    )
    out = {}
    for pure in ("0", "1"):
        path = str(tmp_path / f"x{pure}.npy")
        env = dict(os.environ, TDNNS_PIEZO_PURE=pure)
        subprocess.run([sys.executable, "-c", code % path], env=env, check=True)
        out[pure] = np.load(path)
    a, b = out["0"], out["1"]
    assert np.abs(a - b).max() <= 1e-10 * np.abs(a).max()
