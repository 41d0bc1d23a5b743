"""Field evaluation, errors, tip deflection, ZZ indicator, averages and output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable

import numpy as np

from .fespace import NORMAL_NORMAL, BasisEval, DofMap, NodalContinuous, build_space, eval_basis, evaluate
from .forms import BlockSystem, material_arrays
from .mesh import Mesh2D, locate
from .quadrature import LOCAL_EDGES, edge_rule, lattice_points, triangle_rule


class PostprocError(ValueError):
    pass


# -- views -----------------------------------------------------------------------

class View:
    """A field on a mesh, evaluable per triangle at reference points."""

    mesh: Mesh2D
    ncomp: int

    def values(self, tris, ref_points) -> np.ndarray:
        """(ntris, npts, ncomp); ``ref_points`` shared (npts, 2) or per triangle."""
        raise NotImplementedError

    def at_points(self, points) -> np.ndarray:
        """Values at physical points (n, ncomp); points must lie in the mesh."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tris, ref = locate(self.mesh, points)
        if np.any(tris < 0):
            bad = points[int(np.argmax(tris < 0))]
            raise PostprocError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
        return self.values(tris, ref[:, None, :])[:, 0]

    def __call__(self, points) -> np.ndarray:
        return self.at_points(points)


@dataclass(eq=False)
class FieldView(View):
    """Finite element function: coefficients in a DofMap."""

    dm: DofMap
    coeffs: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.dm.n_dofs,):
            raise PostprocError(
                f"field {self.name!r}: {self.coeffs.size} coefficients for {self.dm.n_dofs} dofs")

    @property
    def mesh(self) -> Mesh2D:
        return self.dm.mesh

    @property
    def ncomp(self) -> int:
        return self.dm.kind.ncomp

    def basis_eval(self, tris, ref_points) -> BasisEval:
        return evaluate(self.dm, self.coeffs, tris, ref_points)

    def values(self, tris, ref_points) -> np.ndarray:
        return self.basis_eval(tris, ref_points).values[:, :, 0]


@dataclass(eq=False)
class StackedView(View):
    """Vector field assembled from scalar components on one mesh."""

    parts: tuple

    def __post_init__(self):
        if len({id(p.mesh) for p in self.parts}) != 1:
            raise PostprocError("stacked components must share one mesh")

    @property
    def mesh(self) -> Mesh2D:
        return self.parts[0].mesh

    @property
    def ncomp(self) -> int:
        return sum(p.ncomp for p in self.parts)

    def values(self, tris, ref_points) -> np.ndarray:
        return np.concatenate([p.values(tris, ref_points) for p in self.parts], axis=-1)


@dataclass(eq=False)
class DerivedView(View):
    """Pointwise function of other views, e.g. a constitutive recovery."""

    mesh: Mesh2D
    ncomp: int
    fn: Callable  # (tris, ref_points) -> (ntris, npts, ncomp)

    def values(self, tris, ref_points) -> np.ndarray:
        return self.fn(np.asarray(tris, dtype=np.int64), ref_points)


def _physical_points(mesh: Mesh2D, tris, ref_points) -> np.ndarray:
    x0, F, _ = mesh.affine_maps()
    tris = np.asarray(tris, dtype=np.int64)
    ref = np.asarray(ref_points, dtype=float)
    if ref.ndim == 2:
        return x0[tris][:, None, :] + np.einsum("tij,qj->tqi", F[tris], ref)
    return x0[tris][:, None, :] + np.einsum("tij,tqj->tqi", F[tris], ref)


# -- solution fields ---------------------------------------------------------

@dataclass
class SolutionFields:
    """Solved fields of one formulation, with constitutive recoveries."""

    system: BlockSystem
    x: np.ndarray
    materials: object

    def __post_init__(self):
        self.parts = self.system.split(self.x)

    @property
    def formulation(self) -> str:
        return self.system.spaces.formulation

    @property
    def mesh(self) -> Mesh2D:
        return next(iter(self.system.spaces.fields.values())).mesh

    def field(self, name: str) -> FieldView:
        return FieldView(self.system.spaces.fields[name], self.parts[name], name)

    def displacement(self) -> View:
        if self.formulation == "primal":
            return StackedView((self.field("ux"), self.field("uz")))
        return self.field("u")

    def _mat(self, tris):
        return material_arrays(self.mesh, self.materials, tris)

    def _grad_phi(self, tris, ref):
        return self.field("phi").basis_eval(tris, ref).grad[:, :, 0, 0, :]

    def _primal_strain(self, tris, ref):
        gx = self.field("ux").basis_eval(tris, ref).grad[:, :, 0, 0, :]
        gz = self.field("uz").basis_eval(tris, ref).grad[:, :, 0, 0, :]
        return np.stack([gx[..., 0], gz[..., 1], gx[..., 1] + gz[..., 0]], axis=-1)

    def stress(self) -> View:
        if self.formulation != "primal":
            return self.field("sigma")

        def fn(tris, ref):
            m = self._mat(tris)
            eps = self._primal_strain(tris, ref)
            sig = np.einsum("tij,tqj->tqi", m["C_E2"], eps)
            if "phi" in self.parts:
                sig += np.einsum("tji,tqj->tqi", m["e2"], self._grad_phi(tris, ref))
            return sig

        return DerivedView(self.mesh, 3, fn)

    def electric_field(self) -> View:
        if self.formulation in ("v2", "v2_divfree"):
            return recover_e_field(self.field("sigma"), self.field("D"), self.materials)
        if "phi" not in self.parts:
            raise PostprocError("no electric unknowns in an elastic solution")
        return DerivedView(self.mesh, 2, lambda t, r: -self._grad_phi(t, r))

    def dielectric_displacement(self) -> View:
        if self.formulation in ("v2", "v2_divfree"):
            return self.field("D")
        E = self.electric_field()
        if self.formulation == "primal":
            def fn(tris, ref):
                m = self._mat(tris)
                eps = self._primal_strain(tris, ref)
                return (np.einsum("tij,tqj->tqi", m["e2"], eps)
                        + np.einsum("tij,tqj->tqi", m["eps_eps2"], E.values(tris, ref)))
        else:
            sig = self.stress()

            def fn(tris, ref):
                m = self._mat(tris)
                return (np.einsum("tij,tqj->tqi", m["d2"], sig.values(tris, ref))
                        + np.einsum("tij,tqj->tqi", m["eps_sigma2"], E.values(tris, ref)))
        return DerivedView(self.mesh, 2, fn)

    def strain(self) -> View:
        """Engineering Voigt strain (xx, zz, gamma_xz)."""
        if self.formulation == "primal":
            return DerivedView(self.mesh, 3, self._primal_strain)
        sig = self.stress()
        if self.formulation == "tdnns_elastic":
            def fn(tris, ref):
                return np.einsum("tij,tqj->tqi", self._mat(tris)["S_E2"], sig.values(tris, ref))
        elif self.formulation == "v1":
            E = self.electric_field()

            def fn(tris, ref):
                m = self._mat(tris)
                return (np.einsum("tij,tqj->tqi", m["S_E2"], sig.values(tris, ref))
                        + np.einsum("tji,tqj->tqi", m["d2"], E.values(tris, ref)))
        else:
            D = self.field("D")

            def fn(tris, ref):
                m = self._mat(tris)
                return (np.einsum("tij,tqj->tqi", m["S_D2"], sig.values(tris, ref))
                        + np.einsum("tji,tqj->tqi", m["g2"], D.values(tris, ref)))
        return DerivedView(self.mesh, 3, fn)


def recover_e_field(sigma: View, D: View, materials) -> DerivedView:
    """Electric field from the g-form law, E = -g sigma + (eps^sigma)^-1 D."""
    mesh = sigma.mesh
    if D.mesh is not mesh:
        raise PostprocError("stress and dielectric displacement live on different meshes")

    def fn(tris, ref):
        m = material_arrays(mesh, materials, tris)
        return (-np.einsum("tij,tqj->tqi", m["g2"], sigma.values(tris, ref))
                + np.einsum("tij,tqj->tqi", m["eps_sigma2_inv"], D.values(tris, ref)))

    return DerivedView(mesh, 2, fn)


# -- integrals -----------------------------------------------------------------

def _quadrature(mesh: Mesh2D, degree: int, tris=None):
    tris = np.arange(mesh.n_triangles) if tris is None else np.asarray(tris, dtype=np.int64)
    pts, w = triangle_rule(degree)
    _, _, det = mesh.affine_maps()
    return tris, pts, det[tris][:, None] * w[None, :]


def _field_order(v) -> int:
    if isinstance(v, FieldView):
        return v.dm.kind.order
    if isinstance(v, StackedView):
        return max(_field_order(p) for p in v.parts)
    return 2


def l2_error(a: View, b, degree: int | None = None, chunk: int = 4096) -> float:
    """L2 norm of a - b over a's mesh.

    ``b`` is a view on the same mesh, or a callable of physical points (n, 2)
    returning (n, ncomp); use ``view.at_points`` to compare across meshes.
    """
    if degree is None:
        degree = 2 * _field_order(a) + 4
    if isinstance(b, View):
        if b.mesh is not a.mesh:
            raise PostprocError("l2_error needs fields on the same mesh; pass b.at_points to "
                                "compare across meshes")
        if b.ncomp != a.ncomp:
            raise PostprocError(f"component mismatch: {a.ncomp} vs {b.ncomp}")
    tris, pts, wq = _quadrature(a.mesh, degree)
    total = 0.0
    for s in range(0, len(tris), chunk):
        t = tris[s:s + chunk]
        va = a.values(t, pts)
        if isinstance(b, View):
            vb = b.values(t, pts)
        elif callable(b):
            xq = _physical_points(a.mesh, t, pts)
            vb = np.asarray(b(xq.reshape(-1, 2)), dtype=float).reshape(va.shape)
        else:
            vb = np.broadcast_to(np.asarray(b, dtype=float), va.shape)
        total += float(np.sum(wq[s:s + chunk] * np.sum((va - vb) ** 2, axis=-1)))
    return math.sqrt(total)


def integrate(v: View, degree: int = 6, tris=None) -> np.ndarray:
    """Integral of each component over the selected triangles."""
    tris, pts, wq = _quadrature(v.mesh, degree, tris)
    if len(tris) == 0:
        return np.zeros(v.ncomp)
    return np.einsum("tq,tqc->c", wq, v.values(tris, pts))


def volume_average(v: View, degree: int = 6, regions=None) -> np.ndarray:
    """Mean over the mesh, or over triangles of the given material regions."""
    mesh = v.mesh
    tris = np.arange(mesh.n_triangles)
    if regions is not None:
        tris = tris[np.isin(mesh.regions, list(regions))]
    if len(tris) == 0:
        raise PostprocError("empty averaging domain")
    area = float(np.sum(0.5 * mesh.affine_maps()[2][tris]))
    return integrate(v, degree, tris) / area


def boundary_average(v: View, markers, component: int | None = None, n_points: int = 6) -> np.ndarray:
    """Mean over the boundary edges carrying ``markers``."""
    mesh = v.mesh
    eids = mesh.marker_edges(markers)
    if len(eids) == 0:
        raise PostprocError(f"no edges carry marker(s) {markers}")
    tri = mesh.edge_tris[eids, 0]
    slot = np.argmax(mesh.tri_edges[tri] == eids[:, None], axis=1)
    _, w, pts = edge_rule(n_points)
    lengths = mesh.edge_lengths()[eids]
    acc = np.zeros(v.ncomp)
    for le in range(3):
        sel = slot == le
        if sel.any():
            vals = v.values(tri[sel], pts[le])
            acc += np.einsum("e,q,eqc->c", lengths[sel], w, vals)
    out = acc / lengths.sum()
    return out if component is None else out[component]


def average_tip_deflection(u: View, tip_marker: int = 6) -> float:
    """Mean transverse displacement over the tip, int u_z ds / |tip|."""
    return float(boundary_average(u, [tip_marker], component=1))


# -- ZZ indicator ----------------------------------------------------------------

@dataclass
class ZZResult:
    indicators: np.ndarray
    marked: np.ndarray
    recovered: View

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.indicators ** 2)))


def nodal_average(v: View, order: int, by_region: bool = True) -> DerivedView:
    """Continuous recovery by arithmetic averaging of element values at Lagrange nodes.

    With ``by_region`` nodes on material-region interfaces are averaged per
    region, so fields that jump there (stress across an internal electrode)
    are recovered piecewise continuous.
    """
    mesh = v.mesh
    kind = NodalContinuous(order)
    dm = build_space(mesh, kind)
    lat = lattice_points(order)
    nT = mesh.n_triangles
    vals = v.values(np.arange(nT), lat)  # (nT, nloc, ncomp)
    if by_region:
        _, ridx = np.unique(mesh.regions, return_inverse=True)
    else:
        ridx = np.zeros(nT, dtype=np.int64)
    key = dm.cell_dofs + dm.n_dofs * ridx.reshape(-1, 1)
    uniq, inv = np.unique(key.ravel(), return_inverse=True)
    acc = np.zeros((len(uniq), v.ncomp))
    np.add.at(acc, inv, vals.reshape(-1, v.ncomp))
    acc /= np.bincount(inv, minlength=len(uniq))[:, None]
    coef = acc[inv].reshape(nT, -1, v.ncomp)

    def fn(tris, ref):
        ref = np.asarray(ref, dtype=float)
        if ref.ndim == 2:
            phi = eval_basis(kind, ref).values[..., 0]  # (npts, nloc)
            return np.einsum("qi,tic->tqc", phi, coef[tris])
        nt, npt = ref.shape[:2]
        phi = eval_basis(kind, ref.reshape(-1, 2)).values[..., 0].reshape(nt, npt, -1)
        return np.einsum("tqi,tic->tqc", phi, coef[tris])

    return DerivedView(mesh, v.ncomp, fn)


def zz_estimate(sigma: View, fraction: float = 0.5, order: int | None = None) -> ZZResult:
    """Zienkiewicz-Zhu indicator eta_T = |sigma* - sigma|_L2(T); mark eta > fraction max."""
    if isinstance(sigma, FieldView) and sigma.dm.kind.family != NORMAL_NORMAL:
        raise PostprocError("the ZZ indicator expects a normal-normal continuous stress")
    k = order if order is not None else max(1, _field_order(sigma))
    rec = nodal_average(sigma, k)
    mesh = sigma.mesh
    tris, pts, wq = _quadrature(mesh, 2 * k + 2)
    diff = rec.values(tris, pts) - sigma.values(tris, pts)
    eta = np.sqrt(np.maximum(np.einsum("tq,tqc->t", wq, diff ** 2), 0.0))
    emax = eta.max() if len(eta) else 0.0
    scale = max(float(np.abs(sigma.values(tris, pts)).max()), 1e-300)
    if emax <= 1e-12 * scale * math.sqrt(mesh.total_area()):
        marked = np.zeros(0, dtype=np.int64)
    else:
        marked = np.flatnonzero(eta > fraction * emax)
        if len(marked) == 0:
            marked = np.array([int(np.argmax(eta))])
    return ZZResult(eta, marked, rec)


# -- homogenization --------------------------------------------------------------

@dataclass
class EffectiveConstants:
    G13: float
    d15: float
    eps11: float
    gamma5: float
    sigma5: float
    E1: float
    D1: float
    # E1 of case A, reported to document the electric decoupling of the shear case
    E1_case_a: float = 0.0


def homogenized_constants(case_a: SolutionFields, case_b: SolutionFields,
                          electric_regions=None, degree: int = 8) -> EffectiveConstants:
    """Effective shear modulus, d15 and permittivity from two RVE solutions.

    Case A (applied shear) gives G = sigma5 / gamma5; case B (field across the
    cell) gives d15 = gamma5 / E1 and eps11 = D1 / E1. ``electric_regions``
    restricts the electric averages.
    """
    ga = volume_average(case_a.strain(), degree)
    sa = volume_average(case_a.stress(), degree)
    gamma5_a, sigma5 = float(ga[2]), float(sa[2])
    gb = volume_average(case_b.strain(), degree)
    Eb = volume_average(case_b.electric_field(), degree, electric_regions)
    Db = volume_average(case_b.dielectric_displacement(), degree, electric_regions)
    if abs(gamma5_a) < 1e-300:
        raise PostprocError("vanishing mean shear strain in the shear case")
    if abs(Eb[0]) < 1e-300:
        raise PostprocError("vanishing mean electric field in the field case")
    try:
        Ea = float(volume_average(case_a.electric_field(), degree, electric_regions)[0])
    except PostprocError:
        Ea = 0.0
    return EffectiveConstants(
        G13=sigma5 / gamma5_a,
        d15=float(gb[2]) / float(Eb[0]),
        eps11=float(Db[0]) / float(Eb[0]),
        gamma5=gamma5_a, sigma5=sigma5, E1=float(Eb[0]), D1=float(Db[0]), E1_case_a=Ea,
    )


# -- Gauss law ---------------------------------------------------------------------

def element_charge(D: FieldView) -> np.ndarray:
    """Per-element integral of div D."""
    mesh = D.mesh
    tris, pts, wq = _quadrature(mesh, 2 * D.dm.kind.order)
    div = D.basis_eval(tris, pts).div[:, :, 0]
    return np.einsum("tq,tq->t", wq, div)


def element_boundary_flux(D: FieldView) -> np.ndarray:
    """Per-element integral of |D.n| over the element boundary, the scale of the charge."""
    mesh = D.mesh
    tris = np.arange(mesh.n_triangles)
    _, w, pts = edge_rule(D.dm.kind.order + 1)
    verts = mesh.vertices[mesh.triangles]
    out = np.zeros(mesh.n_triangles)
    for e, (a, b) in enumerate(LOCAL_EDGES):
        d = verts[:, b] - verts[:, a]
        # (dz, -dx) is a normal scaled by the edge length, which the weights need
        nl = np.column_stack([d[:, 1], -d[:, 0]])
        vals = D.values(tris, pts[e])
        out += np.abs(np.einsum("tqc,tc->tq", vals, nl)) @ w
    return out


# -- convergence records ------------------------------------------------------------

@dataclass
class ConvergenceRow:
    level: int
    ndof: int
    h: float
    l2_error: float
    tip_error: float
    rate: float = float("nan")
    tip_rate: float = float("nan")


@dataclass
class ConvergenceRecord:
    label: str = ""
    rows: list = field(default_factory=list)

    def add(self, ndof: int, h: float, l2: float, tip: float) -> ConvergenceRow:
        if self.rows and ndof <= self.rows[-1].ndof:
            raise PostprocError("dof counts must increase from level to level")
        row = ConvergenceRow(len(self.rows), int(ndof), float(h), float(l2), float(tip))
        if self.rows:
            prev = self.rows[-1]
            row.rate = observed_rate(prev.l2_error, l2, prev.h, h)
            row.tip_rate = observed_rate(prev.tip_error, tip, prev.h, h)
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def ratios(self) -> np.ndarray:
        """Successive error ratios e_{l-1} / e_l."""
        e = self.column("l2_error")
        return e[:-1] / e[1:]


def matched_dof_error(record: ConvergenceRecord, ndof: int) -> float:
    """Error of ``record`` at ``ndof`` by log-log interpolation between its rows."""
    n = record.column("ndof").astype(float)
    e = record.column("l2_error")
    if not n[0] <= ndof <= n[-1]:
        raise PostprocError(f"{ndof} dofs lie outside the recorded range {int(n[0])}..{int(n[-1])}")
    if np.any(e <= 0.0):
        # exact levels (zero error) have no logarithm; fall back to linear in log N
        return float(np.interp(np.log(ndof), np.log(n), e))
    return float(np.exp(np.interp(np.log(ndof), np.log(n), np.log(e))))


def observed_rate(e0: float, e1: float, h0: float, h1: float) -> float:
    if e0 <= 0.0 or e1 <= 0.0 or h0 == h1:
        return float("nan")
    return math.log(e0 / e1) / math.log(h0 / h1)


CSV_FIELDS = [f.name for f in dc_fields(ConvergenceRow)]


def write_csv(record: ConvergenceRecord, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in record.rows:
            w.writerow([_fmt(getattr(r, n)) for n in CSV_FIELDS])


def read_csv(path) -> ConvergenceRecord:
    rec = ConvergenceRecord(label=Path(path).stem)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise PostprocError(f"unexpected CSV header {reader.fieldnames}")
        for d in reader:
            rec.rows.append(ConvergenceRow(
                int(d["level"]), int(d["ndof"]), *(float(d[n]) for n in CSV_FIELDS[2:])))
    return rec


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % v


# -- VTK ---------------------------------------------------------------------------

def _subdivision(s: int):
    """Lattice points and sub-triangles of a reference triangle split s times per edge."""
    idx = {}
    pts = []
    for j in range(s + 1):
        for i in range(s + 1 - j):
            idx[i, j] = len(pts)
            pts.append((i / s, j / s))
    cells = []
    for j in range(s):
        for i in range(s - j):
            cells.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j < s - 1:
                cells.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    return np.array(pts), np.array(cells, dtype=np.int64)


def write_vtk(mesh: Mesh2D, fields: dict, path, subdivision: int = 1) -> None:
    """Legacy ASCII unstructured grid; each triangle split into subdivision^2 cells.

    Points are duplicated per triangle so discontinuous fields are shown as is.
    """
    if subdivision < 1:
        raise PostprocError("subdivision must be >= 1")
    ref, sub = _subdivision(subdivision)
    nT = mesh.n_triangles
    tris = np.arange(nT)
    xy = _physical_points(mesh, tris, ref).reshape(-1, 2)
    npl = len(ref)
    cells = (sub[None, :, :] + npl * tris[:, None, None]).reshape(-1, 3)
    data = {name: np.asarray(v.values(tris, ref)).reshape(nT * npl, -1) for name, v in fields.items()}
    lines = ["# vtk DataFile Version 3.0", "tdnns_piezo fields", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(xy)} double"]
    lines += [f"{x:.17g} {z:.17g} 0" for x, z in xy]
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += ["5"] * len(cells)
    lines.append(f"CELL_DATA {len(cells)}")
    lines += ["SCALARS region int 1", "LOOKUP_TABLE default"]
    lines += [str(int(r)) for r in np.repeat(mesh.regions, len(sub))]
    if data:
        lines.append(f"POINT_DATA {len(xy)}")
    for name, arr in data.items():
        nc = arr.shape[1]
        if nc == 1:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += ["%.17g" % v for v in arr[:, 0]]
        elif nc == 2:
            lines.append(f"VECTORS {name} double")
            lines += ["%.17g %.17g 0" % (a, b) for a, b in arr]
        else:
            lines.append(f"FIELD {name}_data 1")
            lines.append(f"{name} {nc} {len(arr)} double")
            lines += [" ".join("%.17g" % v for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vtk_counts(path) -> dict:
    """Point and cell counts of a legacy VTK file written by :func:`write_vtk`."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        head = line.split()
        if head and head[0] in ("POINTS", "CELLS", "CELL_TYPES"):
            out[head[0]] = int(head[1])
    return out
