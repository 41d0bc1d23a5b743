"""Element and global assembly of the mixed and primal formulations.

Sign convention: the stress rows carry the negative compliance and the
positive duality pairing, so all systems are symmetric. Unknown fields are
stacked in the order given by :class:`Spaces`.

Pipeline: element matrices (with orientation signs folded into the basis) ->
optional static condensation -> sparse scatter -> periodic reduction
``x = T y + g`` -> symmetric elimination of essential dofs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .fespace import (
    DISCONTINUOUS,
    NODAL,
    NORMAL,
    NORMAL_NORMAL,
    TANGENTIAL,
    DofMap,
    Discontinuous,
    NodalContinuous,
    NormalContinuous,
    NormalNormalContinuous,
    TangentialContinuous,
    build_space,
    edge_functionals,
    eval_basis,
    map_to_physical,
    merge_regions,
    reduction,
)
from .material import Material2D
from .mesh import Mesh2D
from .quadrature import edge_rule, triangle_rule
from .solver import Condensation, static_condense

FORMULATIONS = ("tdnns_elastic", "primal", "v1", "v2", "v2_divfree")
# element entries below this fraction of their field block are roundoff
CHOP = 1e-14


class FormError(ValueError):
    pass


# -- problem data --------------------------------------------------------------

@dataclass
class LoadSpec:
    """Loads and prescribed boundary data, keyed by boundary marker.

    ``t_nt`` is the tangential traction along the counterclockwise unit
    tangent (-n_z, n_x); ``q0`` is the outward normal dielectric displacement.
    Values are floats or callables of physical points (n, 2).
    """

    body_force: object = (0.0, 0.0)
    t_nn: dict = field(default_factory=dict)
    t_nt: dict = field(default_factory=dict)
    q0: dict = field(default_factory=dict)
    phi0: dict = field(default_factory=dict)
    rho_e: float = 0.0

    def __post_init__(self):
        if self.rho_e != 0.0:
            raise FormError("free charge density must vanish in a non-conducting solid")

    def check(self, mesh: Mesh2D) -> None:
        known = mesh.marker_ids()
        for name in ("t_nn", "t_nt", "q0", "phi0"):
            bad = set(getattr(self, name)) - known
            if bad:
                raise FormError(f"{name} references unknown markers {sorted(bad)}")


@dataclass(frozen=True)
class Boundary:
    """Marker roles: clamped (u_t = 0, primal u = 0) and electrodes (phi given)."""

    clamped: frozenset = frozenset({1})
    electrodes: frozenset = frozenset({2, 3, 4})
    # material-region groups for the dielectric displacement; None = automatic
    d_groups: tuple | None = None


@dataclass
class Spaces:
    formulation: str
    fields: dict  # name -> DofMap, in unknown order
    order: int
    order_phi: int | None = None

    def offsets(self) -> dict:
        out, o = {}, 0
        for name, dm in self.fields.items():
            out[name] = o
            o += dm.n_dofs
        return out

    @property
    def n_dofs(self) -> int:
        return sum(dm.n_dofs for dm in self.fields.values())


def _boundary_markers(mesh: Mesh2D) -> set[int]:
    b = mesh.boundary_edges()
    return set(int(m) for m in np.unique(mesh.edge_markers[b]) if m)


def _interior_markers(mesh: Mesh2D) -> set[int]:
    inner = mesh.edge_tris[:, 1] >= 0
    return set(int(m) for m in np.unique(mesh.edge_markers[inner]) if m)


def make_spaces(mesh: Mesh2D, formulation: str, k: int, k_phi: int | None = None,
                boundary: Boundary = Boundary()) -> Spaces:
    """Standard spaces and essential markers for one formulation."""
    if formulation not in FORMULATIONS:
        raise FormError(f"unknown formulation {formulation!r}")
    bnd = _boundary_markers(mesh)
    clamped = set(boundary.clamped) & mesh.marker_ids()
    electrodes = set(boundary.electrodes) & mesh.marker_ids()
    free = bnd - clamped
    if formulation == "primal":
        kp = k if k_phi is None else k_phi
        du = build_space(mesh, NodalContinuous(k), clamped)
        fields = {"ux": du, "uz": du, "phi": build_space(mesh, NodalContinuous(kp), electrodes)}
        return Spaces(formulation, fields, k, kp)
    fields = {
        "sigma": build_space(mesh, NormalNormalContinuous(k), free),
        "u": build_space(mesh, TangentialContinuous(k), clamped),
    }
    if formulation == "tdnns_elastic":
        return Spaces(formulation, fields, k)
    if formulation == "v1":
        kp = k + 1 if k_phi is None else k_phi
        if kp < 1:
            raise FormError("V1 needs a continuous potential of order >= 1")
        fields["phi"] = build_space(mesh, NodalContinuous(kp), electrodes)
        return Spaces(formulation, fields, k, kp)
    divfree = formulation == "v2_divfree"
    kp = 0 if divfree else k - 1
    if k_phi is not None and k_phi != kp:
        if divfree:
            raise FormError("the divergence-free variant uses a piecewise constant potential")
        raise FormError(f"full V2 of order {k} pairs with a discontinuous potential of order {kp}")
    fields["phi"] = build_space(mesh, Discontinuous(kp), ())
    dkind = NormalContinuous(k, divfree)
    ess = bnd - electrodes
    groups = boundary.d_groups
    if groups is None and electrodes & _interior_markers(mesh):
        groups = tuple((int(r),) for r in np.unique(mesh.regions))
    if groups:
        parts = [build_space(mesh, dkind, ess, region_restriction=g) for g in groups]
        fields["D"] = merge_regions(parts)
    else:
        fields["D"] = build_space(mesh, dkind, ess)
    return Spaces(formulation, fields, k, kp)


# -- element data --------------------------------------------------------------

def material_arrays(mesh: Mesh2D, materials, tris) -> dict:
    if isinstance(materials, Material2D):
        materials = {int(r): materials for r in np.unique(mesh.regions)}
    regs = mesh.regions[tris]
    missing = set(int(r) for r in np.unique(regs)) - set(materials)
    if missing:
        raise FormError(f"no material given for regions {sorted(missing)}")
    keys = sorted(materials)
    idx = np.searchsorted(keys, regs)
    out = {}
    for name in ("C_E2", "S_E2", "S_D2", "e2", "d2", "g2", "eps_eps2", "eps_sigma2",
                 "eps_sigma2_inv"):
        stack = np.array([getattr(materials[r], name) for r in keys])
        out[name] = stack[idx]
    return out


class _Chunk:
    """Geometry and quadrature for a batch of triangles."""

    def __init__(self, mesh: Mesh2D, tris: np.ndarray, order: int):
        self.mesh = mesh
        self.tris = tris
        x0, F, det = mesh.affine_maps()
        self.F, self.det = F[tris], det[tris]
        self.qpts, qw = triangle_rule(2 * order + 2)
        self.w = det[tris][:, None] * qw[None, :]
        self.xq = x0[tris][:, None, :] + np.einsum("tij,nj->tni", self.F, self.qpts)
        s, we, epts = edge_rule(order + 2)
        ne = len(s)
        self.ne = ne
        self.epts = epts.reshape(-1, 2)
        lengths = mesh.edge_lengths()[mesh.tri_edges[tris]]  # (t, 3)
        self.ew = (lengths[:, :, None] * we[None, None, :]).reshape(len(tris), 3 * ne)
        normals = mesh.outward_normals()[tris]  # (t, 3, 2)
        self.en = np.repeat(normals, ne, axis=1)  # (t, 3 ne, 2)
        self.ex = x0[tris][:, None, :] + np.einsum("tij,nj->tni", self.F, self.epts)
        self.emarker = np.repeat(mesh.edge_markers[mesh.tri_edges[tris]], ne, axis=1)
        inner = mesh.edge_tris[mesh.tri_edges[tris], 1] >= 0
        self.eboundary = np.repeat(~inner, ne, axis=1)
        self._cache = {}

    def basis(self, dm: DofMap, edge: bool = False):
        key = (id(dm), edge)
        if key not in self._cache:
            pts = self.epts if edge else self.qpts
            B = map_to_physical(dm.kind, self.F, self.det, eval_basis(dm.kind, pts))
            sg = dm.cell_signs[self.tris][:, None, :]
            vals = B.values * sg[..., None]
            grad = None if B.grad is None else B.grad * sg[..., None, None]
            div = None
            if B.div is not None:
                div = B.div * (sg[..., None] if B.div.ndim == 4 else sg)
            self._cache[key] = (vals, grad, div)
        return self._cache[key]


def _sym_grad(grad):
    return np.stack([grad[..., 0, 0], grad[..., 1, 1], grad[..., 0, 1] + grad[..., 1, 0]], axis=-1)


def _nn(vals, n):
    """Normal-normal component of Voigt tensor values (t, q, i, 3)."""
    nx, nz = n[..., 0][:, :, None], n[..., 1][:, :, None]
    return vals[..., 0] * nx**2 + vals[..., 1] * nz**2 + 2.0 * vals[..., 2] * nx * nz


def _tensor_dot_n(vals, n):
    nx, nz = n[..., 0][:, :, None], n[..., 1][:, :, None]
    return np.stack([vals[..., 0] * nx + vals[..., 2] * nz, vals[..., 2] * nx + vals[..., 1] * nz], axis=-1)


def _vec_dot(vals, n):
    return np.einsum("tqic,tqc->tqi", vals, n)


def _bil(Bi, w, M, Bj):
    return kernels.element_bilinear(Bi, w, M, Bj)


def _col(a):
    return a[..., None]


def local_duality(ch: _Chunk, sdm: DofMap, udm: DofMap, mode: str = "volume_surface") -> np.ndarray:
    """Element blocks of the pairing <eps(u), sigma>, rows sigma, columns u."""
    if sdm.kind.family != NORMAL_NORMAL or udm.kind.family != TANGENTIAL:
        raise FormError("the duality pairing couples NormalNormalContinuous and TangentialContinuous")
    sv, _, sdiv = ch.basis(sdm)
    uv, ug, _ = ch.basis(udm)
    sve, _, _ = ch.basis(sdm, edge=True)
    uve, _, _ = ch.basis(udm, edge=True)
    if mode == "volume_surface":
        vol = _bil(sv, ch.w, np.eye(3), _sym_grad(ug))
        surf = _bil(_col(_nn(sve, ch.en)), ch.ew, -np.eye(1), _col(_vec_dot(uve, ch.en)))
        return vol + surf
    if mode == "divergence_surface":
        vol = _bil(sdiv, ch.w, -np.eye(2), uv)
        sn = _tensor_dot_n(sve, ch.en)
        surf = _bil(sn, ch.ew, np.eye(2), uve)
        surf -= _bil(_col(_nn(sve, ch.en)), ch.ew, np.eye(1), _col(_vec_dot(uve, ch.en)))
        return vol + surf
    raise FormError(f"unknown duality mode {mode!r}")


def _value(v, pts):
    if callable(v):
        return np.asarray(v(pts), dtype=float)
    return np.full(pts.shape[:-1], float(v))


def _edge_data(ch: _Chunk, table: dict, boundary_only: bool = True) -> np.ndarray:
    """Per edge-point data from a marker table (zero elsewhere)."""
    out = np.zeros(ch.emarker.shape)
    for mk, v in table.items():
        sel = ch.emarker == int(mk)
        if boundary_only:
            sel &= ch.eboundary
        if sel.any():
            out[sel] = _value(v, ch.ex[sel])
    return out


def _body_force(ch: _Chunk, loads: LoadSpec) -> np.ndarray:
    f = loads.body_force
    if callable(f):
        return np.asarray(f(ch.xq.reshape(-1, 2)), dtype=float).reshape(ch.xq.shape)
    return np.broadcast_to(np.asarray(f, dtype=float), ch.xq.shape)


def _chop(K: np.ndarray, offs: dict, sizes) -> np.ndarray:
    """Zero quadrature roundoff in each element's field blocks.

    Couplings that vanish exactly (bubbles orthogonal to high edge moments)
    come out of quadrature at ~1e-16 of the block; static condensation
    would square them into spurious diagonal entries.
    """
    starts = list(offs.values())
    for ia, na in zip(starts, sizes):
        for ib, nb in zip(starts, sizes):
            blk = K[:, ia:ia + na, ib:ib + nb]
            top = np.abs(blk).max(axis=(1, 2), keepdims=True)
            blk[np.abs(blk) < CHOP * top] = 0.0
    return K


def element_system(mesh: Mesh2D, spaces: Spaces, materials, loads: LoadSpec, tris,
                   boundary: Boundary = Boundary()) -> tuple[np.ndarray, np.ndarray]:
    """Coupled element matrices (nT, nloc, nloc) and vectors (nT, nloc)."""
    tris = np.asarray(tris, dtype=np.int64)
    order = max(spaces.order, spaces.order_phi or 0)
    ch = _Chunk(mesh, tris, order)
    mat = material_arrays(mesh, materials, tris)
    names = list(spaces.fields)
    sizes = [spaces.fields[n].ref.ndof for n in names]
    offs = dict(zip(names, np.concatenate([[0], np.cumsum(sizes)[:-1]])))
    nloc = int(sum(sizes))
    K = np.zeros((len(tris), nloc, nloc))
    f = np.zeros((len(tris), nloc))

    def put(a, b, block, sym=True):
        ia, ib = offs[a], offs[b]
        na, nb = block.shape[1], block.shape[2]
        K[:, ia:ia + na, ib:ib + nb] += block
        if sym and a != b:
            K[:, ib:ib + nb, ia:ia + na] += block.transpose(0, 2, 1)

    def rhs(a, vec):
        ia = offs[a]
        f[:, ia:ia + vec.shape[1]] += vec

    fq = _body_force(ch, loads)
    F = spaces.fields
    form = spaces.formulation

    if form == "primal":
        du, dp = F["ux"], F.get("phi")
        v, g, _ = ch.basis(du)
        zero = np.zeros_like(g[..., 0, 0])
        gx, gz = g[..., 0, 0], g[..., 0, 1]
        # engineering strain of (phi_i, 0) and (0, phi_i)
        ex = np.stack([gx, zero, gz], axis=-1)
        ez = np.stack([zero, gz, gx], axis=-1)
        C = mat["C_E2"]
        put("ux", "ux", _bil(ex, ch.w, C, ex))
        put("ux", "uz", _bil(ex, ch.w, C, ez))
        put("uz", "uz", _bil(ez, ch.w, C, ez))
        rhs("ux", np.einsum("tq,tqi,tq->ti", ch.w, v[..., 0], fq[..., 0]))
        rhs("uz", np.einsum("tq,tqi,tq->ti", ch.w, v[..., 0], fq[..., 1]))
        if dp is not None:
            pv, pg, _ = ch.basis(dp)
            pg = pg[..., 0, :]
            eT = mat["e2"].transpose(0, 2, 1)
            put("ux", "phi", _bil(ex, ch.w, eT, pg))
            put("uz", "phi", _bil(ez, ch.w, eT, pg))
            put("phi", "phi", _bil(pg, ch.w, -mat["eps_eps2"], pg))
            pve = ch.basis(dp, edge=True)[0][..., 0]
            q0 = _edge_data(ch, loads.q0)
            rhs("phi", np.einsum("tq,tqi->ti", ch.ew * q0, pve))
        ve = ch.basis(du, edge=True)[0][..., 0]
        tang = np.stack([-ch.en[..., 1], ch.en[..., 0]], axis=-1)
        tnt = _edge_data(ch, loads.t_nt)
        tnn = _edge_data(ch, loads.t_nn)
        tvec = tnt[..., None] * tang + tnn[..., None] * ch.en
        rhs("ux", np.einsum("tq,tqi->ti", ch.ew * tvec[..., 0], ve))
        rhs("uz", np.einsum("tq,tqi->ti", ch.ew * tvec[..., 1], ve))
        return _chop(K, offs, sizes), f

    sdm, udm = F["sigma"], F["u"]
    sv, _, _ = ch.basis(sdm)
    uv, _, _ = ch.basis(udm)
    put("sigma", "u", local_duality(ch, sdm, udm))
    if form == "v2" or form == "v2_divfree":
        put("sigma", "sigma", _bil(sv, ch.w, -mat["S_D2"], sv))
    else:
        put("sigma", "sigma", _bil(sv, ch.w, -mat["S_E2"], sv))
    rhs("u", np.einsum("tq,tqic,tqc->ti", ch.w, uv, fq))
    uve = ch.basis(udm, edge=True)[0]
    tang = np.stack([-ch.en[..., 1], ch.en[..., 0]], axis=-1)
    tnt = _edge_data(ch, loads.t_nt)
    rhs("u", np.einsum("tq,tqic,tqc->ti", ch.ew * tnt, uve, tang))

    if form == "v1":
        pdm = F["phi"]
        _, pg, _ = ch.basis(pdm)
        pg = pg[..., 0, :]
        dT = mat["d2"].transpose(0, 2, 1)
        put("sigma", "phi", _bil(sv, ch.w, dT, pg))
        put("phi", "phi", _bil(pg, ch.w, -mat["eps_sigma2"], pg))
        pve = ch.basis(pdm, edge=True)[0][..., 0]
        q0 = _edge_data(ch, loads.q0)
        rhs("phi", np.einsum("tq,tqi->ti", ch.ew * q0, pve))
    elif form in ("v2", "v2_divfree"):
        pdm, ddm = F["phi"], F["D"]
        pv = ch.basis(pdm)[0]
        dv, _, ddiv = ch.basis(ddm)
        gT = mat["g2"].transpose(0, 2, 1)
        put("sigma", "D", _bil(sv, ch.w, -gT, dv))
        put("D", "D", _bil(dv, ch.w, mat["eps_sigma2_inv"], dv))
        put("D", "phi", _bil(ddiv[..., None], ch.w, -np.eye(1), pv))
        dve = ch.basis(ddm, edge=True)[0]
        phi0 = _edge_data(ch, {m: v for m, v in loads.phi0.items()
                               if m in boundary.electrodes}, boundary_only=False)
        rhs("D", -np.einsum("tq,tqi->ti", ch.ew * phi0, _vec_dot(dve, ch.en)))
    return _chop(K, offs, sizes), f


# -- global system ---------------------------------------------------------------

@dataclass
class EliminationRecord:
    dofs: np.ndarray  # reduced indices
    values: np.ndarray
    correction: np.ndarray  # A[:, dofs] @ values subtracted from the RHS


@dataclass
class BlockSystem:
    spaces: Spaces
    A: sp.csr_matrix  # reduced, eliminated (identity rows at constrained dofs)
    b: np.ndarray
    K: sp.csr_matrix  # coupled matrix over all unknowns before constraints
    F: np.ndarray
    T: sp.csr_matrix
    g: np.ndarray
    eliminated: EliminationRecord
    cell_dofs: np.ndarray
    condensation: Condensation | None = None
    reduced_ids: np.ndarray | None = None

    @property
    def layout(self) -> dict:
        return {n: (o, self.spaces.fields[n].n_dofs) for n, o in self.spaces.offsets().items()}

    @property
    def scaling(self) -> str:
        """Equilibration suited to this system, see ``solver.factor``."""
        return "saddle" if self.condensation is None else "ruiz"

    @property
    def n_unknowns(self) -> int:
        return self.A.shape[0]

    def expand(self, y: np.ndarray) -> np.ndarray:
        """Full coefficient vector from the reduced solution."""
        x = self.T @ y + self.g
        if self.condensation is not None and len(self.condensation.interior):
            c = self.condensation
            xb = x[self.cell_dofs[:, c.boundary]]
            x[self.cell_dofs[:, c.interior]] = c.recover(xb)
        return x

    def split(self, x: np.ndarray) -> dict:
        return {n: x[o:o + m] for n, (o, m) in self.layout.items()}


def global_cell_dofs(spaces: Spaces) -> np.ndarray:
    offs = spaces.offsets()
    cols = []
    for name, dm in spaces.fields.items():
        cd = dm.cell_dofs + offs[name]
        cd[dm.cell_dofs < 0] = -1
        cols.append(cd)
    return np.concatenate(cols, axis=1)


def interior_positions(spaces: Spaces) -> np.ndarray:
    """Local positions of condensable dofs (interior of all but discontinuous fields)."""
    out, o = [], 0
    seen = set()
    for name, dm in spaces.fields.items():
        ref = dm.ref
        if dm.kind.family != DISCONTINUOUS and ref.n_interior:
            out.extend(range(o + ref.interior_offset, o + ref.ndof))
        seen.add(name)
        o += ref.ndof
    return np.array(out, dtype=np.int64)


def essential_values(spaces: Spaces, loads: LoadSpec, boundary: Boundary = Boundary()) -> dict:
    """Prescribed values of essential dofs, keyed by global dof."""
    offs = spaces.offsets()
    out: dict[int, float] = {}
    for name, dm in spaces.fields.items():
        mesh = dm.mesh
        fam = dm.kind.family
        if fam == NORMAL_NORMAL:
            for mk, v in loads.t_nn.items():
                if int(mk) in dm.essential_markers:
                    eids = mesh.marker_edges([mk])
                    vals = edge_functionals(dm, eids, lambda p, v=v: _value(v, p))
                    out.update({offs[name] + d: x for d, x in vals.items()})
        elif fam == NODAL and name == "phi":
            for mk in sorted(loads.phi0):
                if int(mk) in dm.essential_markers:
                    eids = mesh.marker_edges([mk])
                    v = loads.phi0[mk]
                    vals = edge_functionals(dm, eids, lambda p, v=v: _value(v, p))
                    out.update({offs[name] + d: x for d, x in vals.items()})
        elif fam == NORMAL:
            normals = mesh.outward_normals()
            for mk, v in loads.q0.items():
                if int(mk) not in dm.essential_markers:
                    continue
                for e in mesh.marker_edges([mk]):
                    t = mesh.edge_tris[e, 0]
                    le = int(np.flatnonzero(mesh.tri_edges[t] == e)[0])
                    n = normals[t, le]
                    vals = edge_functionals(
                        dm, [e], lambda p, v=v, n=n: _value(v, p)[:, None] * n[None, :])
                    out.update({offs[name] + d: x for d, x in vals.items()})
    return out


def apply_essential(A: sp.csr_matrix, b: np.ndarray, mask: np.ndarray, values: np.ndarray):
    """Symmetric elimination: move constrained columns to the RHS, set identity rows.

    ``values`` is a full-length vector; entries outside ``mask`` must be zero.
    """
    mask = np.asarray(mask, dtype=bool)
    values = np.asarray(values, dtype=float)
    if np.any(values[~mask] != 0.0):
        raise FormError("essential value given for an unconstrained dof")
    dofs = np.flatnonzero(mask)
    xe = np.zeros(A.shape[0])
    xe[dofs] = values[dofs]
    corr = A @ xe
    b2 = b - corr
    b2[dofs] = values[dofs]
    keep = sp.diags((~mask).astype(float))
    A2 = (keep @ A @ keep + sp.diags(mask.astype(float))).tocsr()
    A2.eliminate_zeros()
    A2.sort_indices()
    return A2, b2, EliminationRecord(dofs, values[dofs], corr)


def assemble(mesh: Mesh2D, spaces: Spaces, materials, loads: LoadSpec,
             boundary: Boundary = Boundary(), condense: bool = False,
             extra_essential: dict | None = None, chunk: int = 1024) -> BlockSystem:
    """Assemble, reduce and constrain the system of one formulation."""
    loads.check(mesh)
    n = spaces.n_dofs
    cd = global_cell_dofs(spaces)
    nT = mesh.n_triangles
    interior = interior_positions(spaces) if condense else np.zeros(0, dtype=np.int64)
    Kg = sp.csr_matrix((n, n))
    Fg = np.zeros(n)
    Kib, fi = [], []
    for start in range(0, nT, chunk):
        tris = np.arange(start, min(start + chunk, nT))
        Ke, fe = element_system(mesh, spaces, materials, loads, tris, boundary)
        if len(interior):
            Ke, fe, c = static_condense(Ke, fe, interior)
            Kib.append(c.Kinv_Kib)
            fi.append(c.Kinv_fi)
        Kg = Kg + kernels.scatter(cd[tris], cd[tris], Ke, (n, n))
        rows = cd[tris].ravel()
        ok = rows >= 0
        np.add.at(Fg, rows[ok], fe.ravel()[ok])
    cond = None
    if len(interior):
        bpos = np.setdiff1d(np.arange(cd.shape[1]), interior)
        cond = Condensation(interior, bpos, np.concatenate(Kib), np.concatenate(fi))

    # periodic reduction, per field
    Ts, gs = [], []
    for dm in spaces.fields.values():
        T, g, _ = reduction(dm)
        Ts.append(T)
        gs.append(g)
    T = sp.block_diag(Ts, format="csr") if len(Ts) > 1 else Ts[0]
    g = np.concatenate(gs)
    # shared dofmaps (primal ux/uz) are distinct blocks already
    if cond is not None:
        drop = np.zeros(n, dtype=bool)
        drop[cd[:, interior].ravel()] = True
        keepcols = np.flatnonzero(np.asarray(abs(T[~drop]).sum(axis=0)).ravel() > 0)
        T = sp.diags((~drop).astype(float)) @ T
        T = T[:, keepcols].tocsr()
    else:
        keepcols = np.arange(T.shape[1])
    A = (T.T @ Kg @ T).tocsr()
    b = T.T @ (Fg - Kg @ g)

    # essential dofs: full-numbering values mapped onto reduced unknowns
    ess_full = np.concatenate([dm.essential for dm in spaces.fields.values()])
    vals_full = essential_values(spaces, loads, boundary)
    if extra_essential:
        for d, v in extra_essential.items():
            ess_full[int(d)] = True
            vals_full[int(d)] = float(v)
    Tc = T.tocsr()
    Tc.sort_indices()
    m = A.shape[0]
    mask = np.zeros(m, dtype=bool)
    values = np.zeros(m)
    dofs = np.flatnonzero(ess_full)
    nnz = np.diff(Tc.indptr)[dofs]
    if np.any(nnz > 1):
        raise FormError(f"essential dof {int(dofs[np.argmax(nnz > 1)])} is not a single reduced unknown")
    dofs = dofs[nnz == 1]
    pos = Tc.indptr[dofs]
    r, sgn = Tc.indices[pos], Tc.data[pos]
    prescribed = np.array([vals_full.get(int(d), 0.0) for d in dofs])
    mask[r] = True
    values[r] = (prescribed - g[dofs]) / sgn
    A2, b2, rec = apply_essential(A, b, mask, values)
    return BlockSystem(spaces, A2, b2, Kg.tocsr(), Fg, T, g, rec, cd, cond, keepcols)


def assemble_tdnns_elastic(mesh, spaces, material, loads, **kw) -> BlockSystem:
    if spaces.formulation != "tdnns_elastic":
        raise FormError("spaces were built for a different formulation")
    if spaces.fields["sigma"].kind.order != spaces.fields["u"].kind.order:
        raise FormError("stress and displacement spaces must have equal order")
    return assemble(mesh, spaces, material, loads, **kw)


def assemble_primal(mesh, spaces, material, loads, **kw) -> BlockSystem:
    if spaces.formulation != "primal":
        raise FormError("spaces were built for a different formulation")
    return assemble(mesh, spaces, material, loads, **kw)


def assemble_v1(mesh, spaces, material, loads, **kw) -> BlockSystem:
    if spaces.formulation != "v1":
        raise FormError("spaces were built for a different formulation")
    if spaces.fields["phi"].kind.order < 1:
        raise FormError("V1 needs a continuous potential of order >= 1")
    return assemble(mesh, spaces, material, loads, **kw)


def assemble_v2(mesh, spaces, material, loads, **kw) -> BlockSystem:
    if spaces.formulation not in ("v2", "v2_divfree"):
        raise FormError("spaces were built for a different formulation")
    if spaces.formulation == "v2_divfree" and spaces.fields["phi"].kind.order != 0:
        raise FormError("the divergence-free variant needs a piecewise constant potential")
    return assemble(mesh, spaces, material, loads, **kw)


def duality_matrix(mesh: Mesh2D, sdm: DofMap, udm: DofMap, mode: str = "volume_surface",
                   chunk: int = 2048) -> sp.csr_matrix:
    """Global matrix of <eps(u), sigma> with rows sigma, columns u."""
    out = sp.csr_matrix((sdm.n_dofs, udm.n_dofs))
    order = max(sdm.kind.order, udm.kind.order)
    for start in range(0, mesh.n_triangles, chunk):
        tris = np.arange(start, min(start + chunk, mesh.n_triangles))
        ch = _Chunk(mesh, tris, order)
        B = local_duality(ch, sdm, udm, mode)
        out = out + kernels.scatter(sdm.cell_dofs[tris], udm.cell_dofs[tris], B,
                                    (sdm.n_dofs, udm.n_dofs))
    return out
