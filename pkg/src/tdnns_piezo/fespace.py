"""Finite element families on triangles and their global dof maps.

Every family is built as the dual basis of a set of dof functionals over an
L2-orthonormal raw polynomial basis on the reference triangle. Nodal spaces
use point values on the equispaced lattice (a Lagrange basis). The other edge
functionals are moments of the relevant trace against Legendre polynomials in
the edge parameter, taken with the unnormalised edge tangent ``tau = end -
start`` and normal ``n = (tau_z, -tau_x)``. With these choices the functionals
are invariant under the respective Piola maps, so shared edge dofs only need
an orientation sign.

Tensor-valued functions are stored as Voigt entries (xx, zz, xz) without the
engineering factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space

from .mesh import Mesh2D
from .quadrature import (
    LOCAL_EDGES,
    REFERENCE_VERTICES,
    edge_rule,
    lattice_points,
    legendre01,
    scalar_polynomials,
    triangle_rule,
)

NODAL = "nodal"
DISCONTINUOUS = "discontinuous"
TANGENTIAL = "tangential"
NORMAL_NORMAL = "normal_normal"
NORMAL = "normal"

_NCOMP = {NODAL: 1, DISCONTINUOUS: 1, TANGENTIAL: 2, NORMAL: 2, NORMAL_NORMAL: 3}
_MAX_ORDER = {NODAL: 6, DISCONTINUOUS: 6, TANGENTIAL: 3, NORMAL: 3, NORMAL_NORMAL: 3}
_NAMES = {
    NODAL: "NodalContinuous",
    DISCONTINUOUS: "Discontinuous",
    TANGENTIAL: "TangentialContinuous",
    NORMAL: "NormalContinuous",
    NORMAL_NORMAL: "NormalNormalContinuous",
}
_TENSOR_SCALE = np.array([1.0, 1.0, 1.0 / np.sqrt(2.0)])


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceKind:
    family: str
    order: int
    divfree: bool = False

    def __post_init__(self):
        if self.family not in _NCOMP:
            raise SpaceError(f"unknown space family {self.family!r}")
        lo = 0 if self.family == DISCONTINUOUS else 1
        if not lo <= self.order <= _MAX_ORDER[self.family]:
            raise SpaceError(
                f"{_NAMES[self.family]} order {self.order} unsupported "
                f"(allowed {lo}..{_MAX_ORDER[self.family]})"
            )
        if self.divfree and self.family != NORMAL:
            raise SpaceError("the divergence-free reduction applies to NormalContinuous only")

    @property
    def ncomp(self) -> int:
        return _NCOMP[self.family]

    def __str__(self) -> str:
        extra = ", divfree" if self.divfree else ""
        return f"{_NAMES[self.family]}({self.order}{extra})"


def NodalContinuous(k: int) -> SpaceKind:
    return SpaceKind(NODAL, k)


def Discontinuous(k: int) -> SpaceKind:
    return SpaceKind(DISCONTINUOUS, k)


def TangentialContinuous(k: int) -> SpaceKind:
    return SpaceKind(TANGENTIAL, k)


def NormalNormalContinuous(k: int) -> SpaceKind:
    return SpaceKind(NORMAL_NORMAL, k)


def NormalContinuous(k: int, divfree: bool = False) -> SpaceKind:
    return SpaceKind(NORMAL, k, divfree)


# -- reference elements ------------------------------------------------------

def _edge_parity(family: str, n: int) -> np.ndarray:
    """Sign of edge dof j when the edge is traversed backwards.

    Nodal edge dofs are point values; they are permuted instead.
    """
    alt = (-1.0) ** np.arange(n)
    if family == NODAL:
        return np.ones(n)
    return alt if family == NORMAL_NORMAL else -alt


class ReferenceElement:
    """Dual basis of one family on the reference triangle.

    Local dof order: vertex dofs, then edge dofs edge by edge (moment index
    fastest), then interior dofs.
    """

    def __init__(self, kind: SpaceKind):
        self.kind = kind
        k, fam = kind.order, kind.family
        self.ncomp = kind.ncomp
        polys = scalar_polynomials(k)
        m = polys.dim
        nraw = self.ncomp * m
        self.n_vertex = 1 if fam == NODAL else 0
        if fam == NODAL:
            self.n_edge = k - 1
        elif fam == DISCONTINUOUS:
            self.n_edge = 0
        else:
            self.n_edge = k + 1

        rows = []
        if fam == NODAL:
            lattice = lattice_points(k)
            rows.append(polys.eval(lattice[: 3 + 3 * self.n_edge])[0])
        elif self.n_edge:
            s, w, pts = edge_rule(k + 2)
            for e, (a, b) in enumerate(LOCAL_EDGES):
                tau = REFERENCE_VERTICES[b] - REFERENCE_VERTICES[a]
                nrm = np.array([tau[1], -tau[0]])
                P = polys.eval(pts[e])[0]
                if fam == TANGENTIAL:
                    weight = tau
                elif fam == NORMAL:
                    weight = nrm
                else:
                    weight = _TENSOR_SCALE * np.array(
                        [nrm[0] ** 2, nrm[1] ** 2, 2.0 * nrm[0] * nrm[1]]
                    )
                for j in range(self.n_edge):
                    mom = (w * legendre01(j, s)) @ P
                    rows.append(np.kron(weight, mom)[None, :])
        boundary = np.vstack(rows) if rows else np.zeros((0, nraw))
        kernel = null_space(boundary) if len(boundary) else np.eye(nraw)
        if fam == NODAL:
            kernel = polys.eval(lattice[3 + 3 * self.n_edge:])[0].T

        self.n_divmoments = 0
        if fam == NORMAL and k >= 2 and kernel.shape[1]:
            qpts, qw = triangle_rule(2 * k)
            _, G = polys.eval(qpts)
            Q = scalar_polynomials(k - 1).eval(qpts)[0]
            # divergence of raw function (c, p) is d_c P_p
            div = np.concatenate([G[:, :, 0], G[:, :, 1]], axis=1)
            mdiv = (Q * qw[:, None]).T @ div
            bubbles = kernel @ null_space(mdiv @ kernel)
            interior = np.vstack([bubbles.T, mdiv[1:]])
            self.n_divmoments = mdiv.shape[0] - 1
        else:
            interior = kernel.T
        self.n_interior = interior.shape[0]
        self.functionals = np.vstack([boundary, interior])
        if self.functionals.shape != (nraw, nraw):
            raise SpaceError(f"{kind}: dof functionals do not match the raw dimension")
        self.condition = float(np.linalg.cond(self.functionals))
        coef = np.linalg.inv(self.functionals).T
        scale = _TENSOR_SCALE if fam == NORMAL_NORMAL else np.ones(self.ncomp)
        coef = coef.reshape(nraw, self.ncomp, m) * scale[None, :, None]

        self.edge_parity = _edge_parity(fam, self.n_edge)
        keep = np.arange(nraw)
        if kind.divfree and self.n_divmoments:
            keep = keep[: nraw - self.n_divmoments]
            self.n_interior -= self.n_divmoments
        self.dofs = keep
        self.coef = coef[keep]
        self.ndof = len(keep)
        self.polys = polys

    @property
    def edge_offset(self) -> int:
        return 3 * self.n_vertex

    @property
    def interior_offset(self) -> int:
        return 3 * self.n_vertex + 3 * self.n_edge


@lru_cache(maxsize=None)
def reference_element(kind: SpaceKind) -> ReferenceElement:
    return ReferenceElement(kind)


@dataclass
class BasisEval:
    """Basis values and derivatives at a set of points.

    ``values`` has shape (..., npts, ndof, ncomp) and ``grad`` shape
    (..., npts, ndof, ncomp, 2); leading axes index triangles after mapping.
    """

    kind: SpaceKind
    values: np.ndarray
    grad: np.ndarray | None = None
    div: np.ndarray | None = None

    def sym_grad(self) -> np.ndarray:
        """Engineering Voigt strain (xx, zz, 2xz) of a vector field."""
        g = self.grad
        return np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 0, 1] + g[..., 1, 0]], axis=-1)

    def divergence(self) -> np.ndarray:
        if self.div is not None:
            return self.div
        g = self.grad
        if self.kind.family == NORMAL_NORMAL:
            # Voigt entries (xx, zz, xz): rows of the tensor divergence
            return np.stack([g[..., 0, 0] + g[..., 2, 1], g[..., 2, 0] + g[..., 1, 1]], axis=-1)
        return g[..., 0, 0] + g[..., 1, 1]

    def scalar_grad(self) -> np.ndarray:
        return self.grad[..., 0, :]


def eval_basis(kind: SpaceKind, ref_points) -> BasisEval:
    """Reference basis values and gradients at reference points."""
    ref = reference_element(kind)
    pts = np.atleast_2d(np.asarray(ref_points, dtype=float))
    P, G = ref.polys.eval(pts)
    vals = np.einsum("icp,np->nic", ref.coef, P)
    grads = np.einsum("icp,npd->nicd", ref.coef, G)
    return BasisEval(kind, vals, grads)


def map_to_physical(kind: SpaceKind, F: np.ndarray, det: np.ndarray,
                    basis: BasisEval, pointwise: bool = False) -> BasisEval:
    """Apply the family's Piola map on a batch of affine triangles.

    ``F`` (nT, 2, 2) and ``det`` (nT,) describe x = x0 + F x_hat. With
    ``pointwise`` the basis holds one point per triangle (npts == nT) and the
    result has a single point axis of length one.
    """
    F = np.asarray(F, dtype=float).reshape(-1, 2, 2)
    det = np.asarray(det, dtype=float).reshape(-1)
    if np.any(det <= 0.0):
        t = int(np.argmax(det <= 0.0))
        raise SpaceError(f"degenerate or inverted triangle (det F = {det[t]:.3g} at batch index {t})")
    Finv = np.linalg.inv(F)
    v, g = basis.values, basis.grad
    if pointwise:
        if len(v) != len(F):
            raise SpaceError("pointwise mapping needs one point per triangle")
        v, g = v[:, None], g[:, None]
        n = "tn"
    else:
        n = "n"
    fam = kind.family
    if fam in (NODAL, DISCONTINUOUS):
        vals = v if pointwise else np.broadcast_to(v, (len(F),) + v.shape)
        grads = np.einsum(f"{n}ice,ted->tnicd", g, Finv)
        return BasisEval(kind, vals, grads)
    if fam == TANGENTIAL:
        vals = np.einsum(f"tac,{n}ia->tnic", Finv, v)
        grads = np.einsum(f"tac,{n}iae,ted->tnicd", Finv, g, Finv)
        return BasisEval(kind, vals, grads)
    if fam == NORMAL:
        FJ = F / det[:, None, None]
        vals = np.einsum(f"tca,{n}ia->tnic", FJ, v)
        divh = g[..., 0, 0] + g[..., 1, 1]
        div = (divh if pointwise else divh[None]) / det[:, None, None]
        return BasisEval(kind, vals, None, div)
    # normal-normal: sigma = F sigma_hat F^T / J^2
    S = _voigt_to_tensor(v)
    full = np.einsum(f"tca,{n}iab,tdb->tnicd", F, S, F) / det[:, None, None, None, None] ** 2
    vals = _tensor_to_voigt(full)
    divh = BasisEval(kind, v, g).divergence()
    div = np.einsum(f"tca,{n}ia->tnic", F, divh) / det[:, None, None, None] ** 2
    return BasisEval(kind, vals, None, div)


def _voigt_to_tensor(v: np.ndarray) -> np.ndarray:
    out = np.empty(v.shape[:-1] + (2, 2))
    out[..., 0, 0] = v[..., 0]
    out[..., 1, 1] = v[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = v[..., 2]
    return out


def _tensor_to_voigt(t: np.ndarray) -> np.ndarray:
    return np.stack([t[..., 0, 0], t[..., 1, 1], t[..., 0, 1]], axis=-1)


# -- global dof maps ---------------------------------------------------------

@dataclass(frozen=True)
class PeriodicMap:
    """x[i] = sign[i] * x[root[i]] + offset[i]; roots satisfy root[i] == i."""

    root: np.ndarray
    sign: np.ndarray
    offset: np.ndarray


@dataclass(frozen=True, eq=False)
class DofMap:
    mesh: Mesh2D
    kind: SpaceKind
    n_dofs: int
    cell_dofs: np.ndarray  # (nT, nloc), -1 where the triangle is inactive
    cell_signs: np.ndarray  # (nT, nloc)
    active: np.ndarray  # (nT,) bool
    essential: np.ndarray  # (n_dofs,) bool
    interior: np.ndarray  # (n_dofs,) bool
    essential_markers: frozenset = frozenset()
    region: int | tuple | None = None
    periodic: PeriodicMap | None = None
    dof_entity: np.ndarray = field(default=None, repr=False)  # (n_dofs, 2): (dim, index)

    @property
    def ref(self) -> ReferenceElement:
        return reference_element(self.kind)

    @property
    def n_reduced(self) -> int:
        if self.periodic is None:
            return self.n_dofs
        return int(np.count_nonzero(self.periodic.root == np.arange(self.n_dofs)))

    def edge_dofs(self, e: int) -> list[np.ndarray]:
        """Dofs attached to edge ``e``, one array per adjacent active triangle."""
        ref = self.ref
        out = []
        for t in self.mesh.edge_tris[e]:
            if t >= 0 and self.active[t]:
                le = int(np.flatnonzero(self.mesh.tri_edges[t] == e)[0])
                sl = slice(ref.edge_offset + le * ref.n_edge, ref.edge_offset + (le + 1) * ref.n_edge)
                out.append(self.cell_dofs[t, sl])
        return out

    def vertex_dof(self, v: int) -> int:
        hit = np.argwhere(self.mesh.triangles == v)
        for t, lv in hit:
            if self.active[t] and self.ref.n_vertex:
                return int(self.cell_dofs[t, lv])
        return -1

    def stats(self) -> dict:
        return {
            "space": str(self.kind),
            "dofs": self.n_dofs,
            "essential": int(self.essential.sum()),
            "interior": int(self.interior.sum()),
            "reduced": self.n_reduced,
        }


def build_space(mesh: Mesh2D, kind: SpaceKind, essential_regions=(),
                region_restriction=None) -> DofMap:
    """Number the dofs of ``kind`` on ``mesh``.

    ``essential_regions`` lists boundary markers whose edges carry essential
    trace dofs (nodal spaces include the edge vertices). ``region_restriction``
    limits a NormalContinuous space to triangles of one material region.
    """
    if region_restriction is not None and kind.family != NORMAL:
        raise SpaceError("region restriction is only supported for NormalContinuous spaces")
    essential_regions = frozenset(int(r) for r in essential_regions)
    missing = essential_regions - mesh.marker_ids()
    if missing:
        raise SpaceError(f"essential markers {sorted(missing)} do not exist on the mesh")
    ref = reference_element(kind)
    nT = mesh.n_triangles
    if region_restriction is None:
        active = np.ones(nT, dtype=bool)
    else:
        regs = np.atleast_1d(region_restriction)
        active = np.isin(mesh.regions, regs)
        if not active.any():
            raise SpaceError(f"region {region_restriction} contains no triangles")
    act = np.flatnonzero(active)

    next_dof = 0
    entity = []
    vdof = -np.ones(mesh.n_vertices, dtype=np.int64)
    if ref.n_vertex:
        used = np.unique(mesh.triangles[act])
        vdof[used] = np.arange(len(used))
        next_dof = len(used)
        entity.append(np.column_stack([np.zeros(len(used), int), used]))
    edof = -np.ones((mesh.n_edges, max(ref.n_edge, 1)), dtype=np.int64)
    if ref.n_edge:
        used = np.unique(mesh.tri_edges[act])
        edof[used] = next_dof + np.arange(len(used) * ref.n_edge).reshape(-1, ref.n_edge)
        next_dof += len(used) * ref.n_edge
        entity.append(np.column_stack([np.ones(len(used) * ref.n_edge, int),
                                       np.repeat(used, ref.n_edge)]))
    tdof = -np.ones((nT, max(ref.n_interior, 1)), dtype=np.int64)
    if ref.n_interior:
        tdof[act] = next_dof + np.arange(len(act) * ref.n_interior).reshape(-1, ref.n_interior)
        next_dof += len(act) * ref.n_interior
        entity.append(np.column_stack([np.full(len(act) * ref.n_interior, 2),
                                       np.repeat(act, ref.n_interior)]))
    n_dofs = next_dof

    nloc = ref.ndof
    cell = -np.ones((nT, nloc), dtype=np.int64)
    sign = np.ones((nT, nloc))
    tr = mesh.triangles[act]
    if ref.n_vertex:
        cell[act, :3] = vdof[tr]
    if ref.n_edge:
        te = mesh.tri_edges[act]
        o = ref.edge_offset
        for le in range(3):
            sl = slice(o + le * ref.n_edge, o + (le + 1) * ref.n_edge)
            cell[act, sl] = edof[te[:, le]]
            flip = mesh.tri_edge_sign[act, le] < 0
            if kind.family == NODAL:
                cell[act[flip], sl] = edof[te[flip, le]][:, ::-1]
            else:
                sign[np.ix_(act[flip], np.arange(sl.start, sl.stop))] = ref.edge_parity
    if ref.n_interior:
        cell[act, ref.interior_offset:] = tdof[act, : ref.n_interior]
    sign[~active] = 0.0

    essential = np.zeros(n_dofs, dtype=bool)
    if essential_regions and (ref.n_edge or ref.n_vertex):
        emask = np.isin(mesh.edge_markers, list(essential_regions))
        touched = np.zeros(mesh.n_edges, dtype=bool)
        touched[mesh.tri_edges[act].ravel()] = True
        eids = np.flatnonzero(emask & touched)
        if ref.n_edge:
            essential[edof[eids].ravel()] = True
        if ref.n_vertex:
            essential[vdof[mesh.edges[eids].ravel()]] = True
    interior = np.zeros(n_dofs, dtype=bool)
    if ref.n_interior:
        interior[tdof[act, : ref.n_interior].ravel()] = True
    dof_entity = np.vstack(entity) if entity else np.zeros((0, 2), int)

    return DofMap(mesh, kind, n_dofs, cell, sign, active, essential, interior,
                  essential_regions, region_restriction, None, dof_entity)


def merge_regions(parts: list[DofMap]) -> DofMap:
    """Concatenate region-restricted maps of one kind into a single space."""
    if not parts:
        raise SpaceError("nothing to merge")
    mesh, kind = parts[0].mesh, parts[0].kind
    count = np.zeros(mesh.n_triangles, dtype=int)
    for p in parts:
        if p.mesh is not mesh or p.kind != kind:
            raise SpaceError("merged spaces must share mesh and kind")
        count += p.active
    if np.any(count != 1):
        raise SpaceError("region parts must cover every triangle exactly once")
    cell = -np.ones_like(parts[0].cell_dofs)
    sign = np.zeros_like(parts[0].cell_signs)
    offset = 0
    for p in parts:
        a = p.active
        cell[a] = p.cell_dofs[a] + offset
        sign[a] = p.cell_signs[a]
        offset += p.n_dofs
    return DofMap(
        mesh, kind, offset, cell, sign, np.ones(mesh.n_triangles, dtype=bool),
        np.concatenate([p.essential for p in parts]),
        np.concatenate([p.interior for p in parts]),
        frozenset().union(*(p.essential_markers for p in parts)),
        tuple(p.region for p in parts), None,
        np.vstack([p.dof_entity for p in parts]),
    )


def with_essential(dm: DofMap, mask) -> DofMap:
    """Copy of ``dm`` with additional essential dofs."""
    ess = dm.essential.copy()
    ess[np.asarray(mask)] = True
    return replace(dm, essential=ess)


# -- trace functionals ---------------------------------------------------------

def _edge_slots(dm: DofMap, edge_ids):
    """(edge, triangle, local edge) triples for active triangles next to edges."""
    mesh = dm.mesh
    out = []
    for e in np.asarray(edge_ids, dtype=int):
        for t in mesh.edge_tris[e]:
            if t >= 0 and dm.active[t]:
                le = int(np.flatnonzero(mesh.tri_edges[t] == e)[0])
                out.append((int(e), int(t), le))
    return out


def edge_functionals(dm: DofMap, edge_ids, trace) -> dict[int, float]:
    """Global dof values determined by a prescribed trace on some edges.

    ``trace(points)`` returns, per family: scalar values (nodal), vectors
    (tangential, normal) or either a scalar normal-normal component with
    respect to the unit normal or Voigt tensor entries (normal-normal).
    """
    ref = dm.ref
    fam = dm.kind.family
    mesh = dm.mesh
    s, w = edge_rule(dm.kind.order + 3)[:2]
    out: dict[int, float] = {}
    if fam == NODAL:
        xy = nodal_points(dm)
        dofs = set()
        for e, t, le in _edge_slots(dm, edge_ids):
            a, b = LOCAL_EDGES[le]
            base = ref.edge_offset + le * ref.n_edge
            dofs.update(int(d) for d in dm.cell_dofs[t, [a, b]])
            dofs.update(int(d) for d in dm.cell_dofs[t, base: base + ref.n_edge])
        dofs = np.array(sorted(dofs), dtype=np.int64)
        vals = np.asarray(trace(xy[dofs]), dtype=float).reshape(len(dofs))
        return {int(d): float(v) for d, v in zip(dofs, vals)}
    for e, t, le in _edge_slots(dm, edge_ids):
        lo, hi = mesh.edges[e]
        xa, xb = mesh.vertices[lo], mesh.vertices[hi]
        tau = xb - xa
        nrm = np.array([tau[1], -tau[0]])
        pts = xa + s[:, None] * tau
        val = np.asarray(trace(pts), dtype=float)
        if fam == TANGENTIAL:
            q = val.reshape(len(s), 2) @ tau
        elif fam == NORMAL:
            q = val.reshape(len(s), 2) @ nrm
        elif fam == NORMAL_NORMAL:
            if val.ndim == 1 or val.shape[-1] == 1:
                q = val.reshape(len(s)) * (nrm @ nrm)
            else:
                v = val.reshape(len(s), 3)
                q = v[:, 0] * nrm[0] ** 2 + v[:, 1] * nrm[1] ** 2 + 2 * v[:, 2] * nrm[0] * nrm[1]
        else:
            raise SpaceError("discontinuous spaces carry no trace dofs")
        base = ref.edge_offset + le * ref.n_edge
        for j in range(ref.n_edge):
            out[int(dm.cell_dofs[t, base + j])] = float(np.sum(w * q * legendre01(j, s)))
    return out


def interpolate(dm: DofMap, fn) -> np.ndarray:
    """Coefficients whose functionals match those of ``fn``.

    Edge and vertex dofs use the trace functionals; interior dofs are fitted
    element-wise by L2 projection of the remainder. Exact for fields in the
    discrete space.
    """
    mesh = dm.mesh
    ref = dm.ref
    x = np.zeros(dm.n_dofs)
    if ref.n_edge or ref.n_vertex:
        for d, v in edge_functionals(dm, np.arange(mesh.n_edges), _trace_adapter(dm, fn)).items():
            x[d] = v
    loc = ref.interior_offset
    pts, wts = triangle_rule(2 * dm.kind.order + 2)
    B = eval_basis(dm.kind, pts)
    x0, F, det = mesh.affine_maps()
    act = np.flatnonzero(dm.active)
    phys = map_to_physical(dm.kind, F[act], det[act], B).values  # (t, n, i, c)
    phys = phys * dm.cell_signs[act][:, None, :, None]
    xq = x0[act][:, None, :] + np.einsum("tij,nj->tni", F[act], pts)
    target = np.asarray(fn(xq.reshape(-1, 2)), float).reshape(len(act), len(pts), -1)
    cd = dm.cell_dofs[act]
    if ref.ndof > loc:
        known = np.einsum("tnic,ti->tnc", phys[:, :, :loc], x[cd[:, :loc]])
        Bi = phys[:, :, loc:]
        wq = wts[None, :, None, None] * det[act][:, None, None, None]
        M = np.einsum("tnic,tnjc->tij", Bi * wq, Bi)
        r = np.einsum("tnic,tnc->ti", Bi * wq, target - known)
        x[cd[:, loc:]] = np.linalg.solve(M, r[..., None])[..., 0] * dm.cell_signs[act][:, loc:]
    return x


def _trace_adapter(dm: DofMap, fn):
    if dm.kind.family == NORMAL_NORMAL:
        return lambda p: np.asarray(fn(p), float).reshape(len(p), 3)
    return fn


def nodal_points(dm: DofMap) -> np.ndarray:
    """Physical coordinates of the Lagrange nodes of a nodal space."""
    if dm.kind.family != NODAL:
        raise SpaceError("nodal points exist for NodalContinuous spaces only")
    x0, F, _ = dm.mesh.affine_maps()
    lat = lattice_points(dm.kind.order)
    act = np.flatnonzero(dm.active)
    xy = x0[act][:, None, :] + np.einsum("tij,nj->tni", F[act], lat)
    out = np.zeros((dm.n_dofs, 2))
    out[dm.cell_dofs[act].ravel()] = xy.reshape(-1, 2)
    return out


# -- periodic identification -------------------------------------------------

def identify_periodic(dm: DofMap, edge_pairing, jump=None, tol: float = 1e-10) -> DofMap:
    """Alias dofs on slave edges to their master edges.

    ``edge_pairing`` maps slave edge ids to master edge ids; each pair must be
    congruent under a pure translation. ``jump(points)`` optionally gives a
    prescribed field difference slave minus master (e.g. an applied shear)
    whose trace functionals become offsets.
    """
    mesh = dm.mesh
    ref = dm.ref
    n = dm.n_dofs
    base = dm.periodic
    parent = np.arange(n) if base is None else base.root.copy()
    psign = np.ones(n) if base is None else base.sign.copy()
    poff = np.zeros(n) if base is None else base.offset.copy()
    scale = float(np.ptp(mesh.vertices, axis=0).max())
    xy = None

    def find(i):
        s, o = 1.0, 0.0
        path = []
        while parent[i] != i:
            path.append(i)
            s, o = s * psign[i], o + s * poff[i]
            i = parent[i]
        # path compression
        cs, co = 1.0, 0.0
        for j in reversed(path):
            cs, co = psign[j] * cs, poff[j] + psign[j] * co
            parent[j], psign[j], poff[j] = i, cs, co
        return i, s, o

    def union(slave, master, sign, offset):
        rs, ss, os_ = find(slave)
        rm, sm, om = find(master)
        if rs == rm:
            return
        # x_slave = sign x_master + offset ; x_rs = (x_slave - os)/ss
        parent[rs] = rm
        psign[rs] = sign * sm / ss
        poff[rs] = (sign * om + offset - os_) / ss

    for slave, master in dict(edge_pairing).items():
        sa, sb = mesh.vertices[mesh.edges[slave]]
        ma, mb = mesh.vertices[mesh.edges[master]]
        shift = sa - ma
        if np.linalg.norm(sb - mb - shift) <= tol * scale:
            same = True
        elif np.linalg.norm(sa - mb - (sb - ma)) <= tol * scale and \
                np.linalg.norm(sb - ma - (sa - mb)) <= tol * scale:
            same = False
            shift = sa - mb
        else:
            raise SpaceError(f"edges {slave} and {master} are not congruent under a translation")
        sd = dm.edge_dofs(slave)
        md = dm.edge_dofs(master)
        if len(sd) != 1 or len(md) != 1:
            raise SpaceError("periodic edges must be boundary edges of the space")
        if dm.kind.family == NODAL:
            sd = md = [np.zeros(0, dtype=np.int64)]
        offs = {}
        if jump is not None and len(sd[0]):
            offs = edge_functionals(dm, [slave], jump)
        for j in range(len(sd[0])):
            sg = 1.0 if same else ref.edge_parity[j]
            d = int(sd[0][j])
            union(d, int(md[0][j]), sg, offs.get(d, 0.0))
        if ref.n_vertex:
            xy = nodal_points(dm) if xy is None else xy
            sl = _edge_node_dofs(dm, slave)
            ml = _edge_node_dofs(dm, master)
            for d in sl:
                gap = np.linalg.norm(xy[ml] - (xy[d] - shift), axis=1)
                o = 0.0
                if jump is not None:
                    o = float(np.asarray(jump(xy[d][None]), float).ravel()[0])
                union(int(d), int(ml[np.argmin(gap)]), 1.0, o)
    roots = np.array([find(i) for i in range(n)], dtype=object)
    root = np.array([r[0] for r in roots], dtype=np.int64)
    sign = np.array([r[1] for r in roots], dtype=float)
    off = np.array([r[2] for r in roots], dtype=float)
    return replace(dm, periodic=PeriodicMap(root, sign, off))


def _edge_node_dofs(dm: DofMap, e: int) -> np.ndarray:
    ref = dm.ref
    for t in dm.mesh.edge_tris[e]:
        if t >= 0 and dm.active[t]:
            le = int(np.flatnonzero(dm.mesh.tri_edges[t] == e)[0])
            a, b = LOCAL_EDGES[le]
            base = ref.edge_offset + le * ref.n_edge
            return np.concatenate([dm.cell_dofs[t, [a, b]], dm.cell_dofs[t, base: base + ref.n_edge]])
    raise SpaceError(f"edge {e} is not part of the space")


def reduction(dm: DofMap) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Return (T, g, roots) with x = T y + g over the independent dofs."""
    n = dm.n_dofs
    if dm.periodic is None:
        return sp.identity(n, format="csr"), np.zeros(n), np.arange(n)
    p = dm.periodic
    roots = np.flatnonzero(p.root == np.arange(n))
    col = -np.ones(n, dtype=np.int64)
    col[roots] = np.arange(len(roots))
    T = sp.csr_matrix((p.sign, (np.arange(n), col[p.root])), shape=(n, len(roots)))
    return T, p.offset.copy(), roots


# -- evaluation ------------------------------------------------------------

def evaluate(dm: DofMap, coeffs: np.ndarray, tris, ref_points) -> BasisEval:
    """Field values at reference points of selected triangles.

    Returns a BasisEval whose ``ndof`` axis is collapsed to length one.
    ``ref_points`` is (npts, 2), shared by all triangles, or (ntris, npts, 2).
    """
    tris = np.atleast_1d(np.asarray(tris, dtype=np.int64))
    pts = np.asarray(ref_points, dtype=float)
    x0, F, det = dm.mesh.affine_maps()
    c = coeffs[dm.cell_dofs[tris]] * dm.cell_signs[tris]
    if pts.ndim == 2:
        B = map_to_physical(dm.kind, F[tris], det[tris], eval_basis(dm.kind, pts))
        return _contract(B, c)
    nt, npt = pts.shape[:2]
    flat = np.repeat(np.arange(nt), npt)
    B = map_to_physical(dm.kind, F[tris[flat]], det[tris[flat]],
                        eval_basis(dm.kind, pts.reshape(-1, 2)), pointwise=True)
    out = _contract(B, c[flat])
    reshape = lambda a: None if a is None else a.reshape((nt, npt) + a.shape[2:])  # noqa: E731
    return BasisEval(dm.kind, reshape(out.values), reshape(out.grad), reshape(out.div))


def evaluate_at(dm: DofMap, coeffs: np.ndarray, tris, ref_points) -> BasisEval:
    """Field at one reference point per entry of ``tris``; leading axis (n, 1)."""
    tris = np.asarray(tris, dtype=np.int64)
    return evaluate(dm, coeffs, tris, np.asarray(ref_points, dtype=float)[:, None, :])


def _contract(B: BasisEval, c: np.ndarray) -> BasisEval:
    vals = np.einsum("tnic,ti->tnc", B.values, c)[:, :, None]
    grad = None if B.grad is None else np.einsum("tnicd,ti->tncd", B.grad, c)[:, :, None]
    div = None
    if B.div is not None:
        div = np.einsum("tni...,ti->tn...", B.div, c)[:, :, None]
    return BasisEval(B.kind, vals, grad, div)
