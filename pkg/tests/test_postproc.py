import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import mms
from tdnns_piezo import fespace as fs
from tdnns_piezo import mesh as msh
from tdnns_piezo import postproc as pp
from tdnns_piezo.driver import solve_spaces
from tdnns_piezo.forms import make_spaces


def const_view(mesh, value):
    value = np.asarray(value, float)
    return pp.DerivedView(mesh, len(value),
                          lambda t, r: np.broadcast_to(value, (len(t), np.shape(r)[-2], len(value))))


def region_view(mesh, values):
    """Piecewise constant field, one value per region id."""
    values = {k: np.asarray(v, float) for k, v in values.items()}
    nc = len(next(iter(values.values())))

    def fn(t, r):
        out = np.array([values[int(g)] for g in mesh.regions[t]])
        return np.broadcast_to(out[:, None, :], (len(t), np.shape(r)[-2], nc))

    return pp.DerivedView(mesh, nc, fn)


@pytest.fixture(scope="module")
def square():
    return msh.rectangle_mesh(1.0, 1.0, 4, 4)


# -- views and L2 errors -------------------------------------------------------------

def test_l2_error_trivial_values(square):
    dm = fs.build_space(square, fs.NodalContinuous(2))
    a = pp.FieldView(dm, np.random.default_rng(0).standard_normal(dm.n_dofs))
    assert pp.l2_error(a, a) == 0.0
    one = pp.FieldView(dm, np.ones(dm.n_dofs))
    assert pp.l2_error(one, 0.0) == pytest.approx(1.0, rel=1e-14)
    assert pp.l2_error(one, lambda p: np.zeros((len(p), 1))) == pytest.approx(1.0, rel=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_l2_error_triangle_inequality(seed):
    mesh = msh.rectangle_mesh(1.0, 0.5, 3, 2)
    dm = fs.build_space(mesh, fs.TangentialContinuous(2))
    rng = np.random.default_rng(seed)
    a, b, c = (pp.FieldView(dm, rng.standard_normal(dm.n_dofs) * 10.0 ** rng.uniform(-3, 3))
               for _ in range(3))
    assert pp.l2_error(a, c) <= pp.l2_error(a, b) + pp.l2_error(b, c) + 1e-12


def test_l2_error_rejections(square):
    dm = fs.build_space(square, fs.NodalContinuous(1))
    other = fs.build_space(msh.rectangle_mesh(1.0, 1.0, 2, 2), fs.NodalContinuous(1))
    a = pp.FieldView(dm, np.zeros(dm.n_dofs))
    with pytest.raises(pp.PostprocError, match="same mesh"):
        pp.l2_error(a, pp.FieldView(other, np.zeros(other.n_dofs)))
    with pytest.raises(pp.PostprocError, match="component"):
        pp.l2_error(a, const_view(square, [0.0, 0.0]))
    with pytest.raises(pp.PostprocError, match="coefficients"):
        pp.FieldView(dm, np.zeros(dm.n_dofs + 1))


def test_point_evaluation_matches_basis_expansion(square, rng):
    dm = fs.build_space(square, fs.NormalNormalContinuous(2))
    c = rng.standard_normal(dm.n_dofs)
    v = pp.FieldView(dm, c)
    ref = rng.dirichlet(np.ones(3), 20)[:, 1:]
    tris = rng.integers(0, square.n_triangles, 20)
    x0, F, _ = square.affine_maps()
    pts = x0[tris] + np.einsum("tij,tj->ti", F[tris], ref)
    direct = v.values(tris, ref[:, None, :])[:, 0]
    assert np.abs(v.at_points(pts) - direct).max() <= 1e-13 * np.abs(direct).max()
    with pytest.raises(pp.PostprocError, match="outside"):
        v.at_points([[2.0, 0.5]])


def test_interpolated_polynomial_is_reproduced(square, rng):
    dm = fs.build_space(square, fs.NodalContinuous(3))
    f = lambda p: (p[:, 0] ** 3 - 2 * p[:, 0] * p[:, 1] ** 2 + 1.0)[:, None]  # noqa: E731
    v = pp.FieldView(dm, fs.interpolate(dm, f))
    pts = rng.uniform(0, 1, (50, 2))
    assert np.abs(v(pts) - f(pts)).max() < 1e-13
    assert pp.l2_error(v, f) < 1e-13


def test_element_charge_and_boundary_flux(square):
    dm = fs.build_space(square, fs.NormalContinuous(1))
    D = pp.FieldView(dm, fs.interpolate(dm, lambda p: np.column_stack([p[:, 0], 2 * p[:, 1]])))
    assert np.allclose(pp.element_charge(D), 3.0 / 32, rtol=1e-13)
    # a constant field crosses each cell twice over its extent normal to the field
    E = pp.FieldView(dm, fs.interpolate(dm, lambda p: np.tile([2.0, 0.0], (len(p), 1))))
    assert np.allclose(pp.element_boundary_flux(E), 2 * 2.0 * 0.25, rtol=1e-13)
    assert np.abs(pp.element_charge(E)).max() < 1e-14


def test_integrate_and_average(square):
    v = const_view(square, [2.0, -1.0])
    assert np.allclose(pp.integrate(v), [2.0, -1.0])
    assert np.allclose(pp.volume_average(v, regions=[1]), [2.0, -1.0])
    with pytest.raises(pp.PostprocError, match="empty"):
        pp.volume_average(v, regions=[99])


# -- tip deflection ----------------------------------------------------------------

def test_tip_deflection_of_rigid_translation(beam):
    dm = fs.build_space(beam, fs.TangentialContinuous(1))
    delta = 3.7e-5
    u = pp.FieldView(dm, fs.interpolate(dm, lambda p: np.tile([0.0, delta], (len(p), 1))))
    assert pp.average_tip_deflection(u) == pytest.approx(delta, rel=1e-14)
    assert pp.average_tip_deflection(pp.FieldView(dm, np.zeros(dm.n_dofs))) == 0.0
    with pytest.raises(pp.PostprocError, match="marker"):
        pp.average_tip_deflection(u, tip_marker=42)


def test_tip_deflection_is_the_edge_mean(beam):
    # u_z = z^2 over the tip x = L averages to (t/2)^2 / 3 on the symmetric section
    dm = fs.build_space(beam, fs.TangentialContinuous(2))
    u = pp.FieldView(dm, fs.interpolate(dm, lambda p: np.column_stack([0 * p[:, 0], p[:, 1] ** 2])))
    assert pp.average_tip_deflection(u) == pytest.approx(5e-4 ** 2 / 3, rel=1e-12)


# -- ZZ indicator ------------------------------------------------------------------

def test_zz_constant_stress_has_no_marks(square):
    dm = fs.build_space(square, fs.NormalNormalContinuous(1))
    sigma = pp.FieldView(dm, fs.interpolate(dm, lambda p: np.tile([1e6, -2e6, 5e5], (len(p), 1))))
    res = pp.zz_estimate(sigma)
    assert res.total < 1e-12 * 1e6
    assert len(res.marked) == 0


@given(st.integers(0, 2**32 - 1))
def test_zz_zero_iff_continuous_per_region(seed):
    rng = np.random.default_rng(seed)
    mesh = msh.structured_beam_mesh(1.0, [0.1, 0.1], 6, 2)
    dm = fs.build_space(mesh, fs.NormalNormalContinuous(1))
    A = rng.standard_normal((3, 2))
    c = rng.standard_normal(3)
    lin = lambda p: p @ A.T + c  # noqa: E731
    smooth = pp.FieldView(dm, fs.interpolate(dm, lin))
    assert pp.zz_estimate(smooth).total < 1e-12 * np.sqrt(mesh.total_area()) * np.abs(c).max()
    # a field that jumps only across the ply interface is continuous per region
    jump = region_view(mesh, {g: rng.standard_normal(3) for g in np.unique(mesh.regions)})
    res = pp.zz_estimate(jump)
    assert res.total < 1e-12 and len(res.marked) == 0
    # random coefficients are discontinuous inside the regions
    rough = pp.zz_estimate(pp.FieldView(dm, rng.standard_normal(dm.n_dofs)))
    assert rough.indicators.max() > 0
    assert int(np.argmax(rough.indicators)) in rough.marked
    assert np.array_equal(rough.marked, np.flatnonzero(rough.indicators > 0.5 * rough.indicators.max()))


def test_zz_rejects_non_stress_fields(square):
    dm = fs.build_space(square, fs.NodalContinuous(1))
    with pytest.raises(pp.PostprocError, match="normal-normal"):
        pp.zz_estimate(pp.FieldView(dm, np.zeros(dm.n_dofs)))


# -- E-field recovery --------------------------------------------------------------

def test_recover_e_field_constant_state(square, pzt5_2d):
    E0 = np.array([3e5, -1e5])
    D = const_view(square, pzt5_2d.eps_sigma2 @ E0)
    E = pp.recover_e_field(const_view(square, [0.0, 0.0, 0.0]), D, pzt5_2d)
    assert pp.l2_error(E, E0) <= 1e-14 * np.abs(E0).max()
    sig = np.array([1e6, 2e6, -3e5])
    Dm = const_view(square, pzt5_2d.d2 @ sig + pzt5_2d.eps_sigma2 @ E0)
    E = pp.recover_e_field(const_view(square, sig), Dm, pzt5_2d)
    assert pp.l2_error(E, E0) <= 1e-12 * np.abs(E0).max()


def test_recovered_field_approaches_potential_gradient():
    dist = []
    for n in (4, 8, 16):
        mesh = msh.rectangle_mesh(1.0, 1.0, n, n)
        spaces = make_spaces(mesh, "v2", 2, boundary=mms.BOUNDARY)
        sol = solve_spaces(mesh, spaces, mms.MODEL, mms.loads(), boundary=mms.BOUNDARY).fields
        grad = pp.DerivedView(mesh, 2, lambda t, r, s=sol: -s._grad_phi(t, r))
        dist.append(pp.l2_error(sol.electric_field(), grad))
    assert dist[0] > dist[1] > dist[2]
    assert math.log2(dist[1] / dist[2]) > 0.8


# -- records and writers -----------------------------------------------------------

def sample_record():
    rec = pp.ConvergenceRecord("sample")
    for i, n in enumerate((100, 400, 1600)):
        rec.add(n, 0.1 / 2**i, math.pi * 4.0 ** -i / 3, math.e * 2.0 ** -i / 7)
    return rec


def test_record_rates_and_ratios():
    rec = sample_record()
    assert np.isnan(rec.rows[0].rate)
    assert rec.rows[2].rate == pytest.approx(2.0, rel=1e-14)
    assert rec.rows[2].tip_rate == pytest.approx(1.0, rel=1e-14)
    assert np.allclose(rec.ratios(), 4.0)
    with pytest.raises(pp.PostprocError, match="increase"):
        rec.add(1600, 0.01, 1.0, 1.0)
    assert np.isnan(pp.observed_rate(0.0, 1.0, 1.0, 0.5))


def test_matched_dof_error_interpolates_log_log():
    rec = sample_record()
    assert pp.matched_dof_error(rec, 400) == pytest.approx(rec.rows[1].l2_error, rel=1e-14)
    # error ~ N^-1 between rows, so 800 dofs lands halfway in log space
    assert pp.matched_dof_error(rec, 800) == pytest.approx(rec.rows[1].l2_error / 2, rel=1e-12)
    with pytest.raises(pp.PostprocError, match="outside"):
        pp.matched_dof_error(rec, 10)


def test_csv_round_trip_keeps_all_digits(tmp_path):
    rec = sample_record()
    path = tmp_path / "rec.csv"
    pp.write_csv(rec, path)
    with path.open() as fh:
        assert next(csv.reader(fh)) == pp.CSV_FIELDS
    back = pp.read_csv(path)
    for a, b in zip(rec.rows, back.rows):
        for name in pp.CSV_FIELDS:
            x, y = getattr(a, name), getattr(b, name)
            assert (x == y) or (np.isnan(x) and np.isnan(y))
    path.write_text("a,b\n1,2\n")
    with pytest.raises(pp.PostprocError, match="header"):
        pp.read_csv(path)


def test_vtk_two_triangles(tmp_path):
    mesh = msh.rectangle_mesh(1.0, 1.0, 1, 1)
    assert mesh.n_triangles == 2
    path = tmp_path / "m.vtk"
    pp.write_vtk(mesh, {"phi": const_view(mesh, [1.0])}, path)
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0\n")
    assert pp.read_vtk_counts(path) == {"POINTS": 6, "CELLS": 2, "CELL_TYPES": 2}
    assert "SCALARS phi double 1" in text


@pytest.mark.parametrize("sub", [1, 2, 3, 5])
def test_vtk_cell_count_scales_with_subdivision(tmp_path, beam, sub):
    dm = fs.build_space(beam, fs.NormalNormalContinuous(1))
    sigma = pp.FieldView(dm, np.zeros(dm.n_dofs))
    u = const_view(beam, [0.0, 1.0])
    path = tmp_path / "f.vtk"
    pp.write_vtk(beam, {"sigma": sigma, "u": u}, path, subdivision=sub)
    counts = pp.read_vtk_counts(path)
    assert counts["CELLS"] == counts["CELL_TYPES"] == beam.n_triangles * sub ** 2
    assert counts["POINTS"] == beam.n_triangles * (sub + 1) * (sub + 2) // 2
    with pytest.raises(pp.PostprocError):
        pp.write_vtk(beam, {}, path, subdivision=0)


def test_vtk_unwritable_path(tmp_path):
    mesh = msh.rectangle_mesh(1.0, 1.0, 1, 1)
    with pytest.raises(OSError):
        pp.write_vtk(mesh, {}, tmp_path / "missing" / "m.vtk")
