"""Conforming triangulations of 2D domains in the x1-x3 plane.

Triangles are stored counterclockwise. The first vertex of each triangle is
its *newest vertex*: the edge opposite to it is the refinement edge used by
newest-vertex bisection. Edges carry a global orientation from the lower to
the higher vertex index. Local edge ``i`` of a triangle is the edge opposite
local vertex ``i``, traversed (1, 2), (0, 2), (0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quadrature import LOCAL_EDGES

FORMAT = "tdnns-mesh-v1"

# Marker ids of the structured beam layout.
CLAMPED, TOP, BOTTOM, INTERNAL, LATERAL, TIP = 1, 2, 3, 4, 5, 6
# Marker ids of the rectangular unit cell.
RVE_LEFT, RVE_RIGHT, RVE_BOTTOM, RVE_TOP = 1, 2, 3, 4

MAX_MARKER = 7


class MeshError(ValueError):
    """Raised when a mesh violates one of its invariants."""


@dataclass(frozen=True, eq=False)
class Mesh2D:
    vertices: np.ndarray  # (nV, 2)
    triangles: np.ndarray  # (nT, 3)
    regions: np.ndarray  # (nT,)
    edges: np.ndarray  # (nE, 2), edges[:, 0] < edges[:, 1]
    tri_edges: np.ndarray  # (nT, 3)
    tri_edge_sign: np.ndarray  # (nT, 3), +1 if local traversal is global
    edge_tris: np.ndarray  # (nE, 2), -1 where absent
    edge_markers: np.ndarray  # (nE,), 0 = unmarked

    @classmethod
    def from_arrays(cls, vertices, triangles, regions=None, markers=None,
                    validate: bool = True) -> "Mesh2D":
        """Build topology from raw arrays.

        ``markers`` maps vertex pairs (any order) to marker ids.
        """
        vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, 2)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        nT = len(triangles)
        regions = (np.ones(nT, dtype=np.int64) if regions is None
                   else np.ascontiguousarray(regions, dtype=np.int64))
        if len(regions) != nT:
            raise MeshError("region array length differs from triangle count")
        if nT and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle references a nonexistent vertex")

        loc = np.array(LOCAL_EDGES)
        starts = triangles[:, loc[:, 0]]
        ends = triangles[:, loc[:, 1]]
        lo = np.minimum(starts, ends).ravel()
        hi = np.maximum(starts, ends).ravel()
        keys = np.column_stack([lo, hi])
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        tri_edges = inverse.reshape(nT, 3)
        tri_edge_sign = np.where(starts < ends, 1, -1).astype(np.int64)

        nE = len(edges)
        counts = np.bincount(inverse, minlength=nE)
        if nT and counts.max() > 2:
            bad = int(np.argmax(counts > 2))
            raise MeshError(
                f"edge {tuple(edges[bad])} is shared by {counts[bad]} triangles"
            )
        edge_tris = -np.ones((nE, 2), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        tri_of = order // 3
        e_sorted = inverse[order]
        first = np.ones(len(e_sorted), dtype=bool)
        first[1:] = e_sorted[1:] != e_sorted[:-1]
        edge_tris[e_sorted[first], 0] = tri_of[first]
        edge_tris[e_sorted[~first], 1] = tri_of[~first]

        edge_markers = np.zeros(nE, dtype=np.int64)
        if markers:
            lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
            for (a, b), mk in markers.items():
                key = (min(a, b), max(a, b))
                if key not in lookup:
                    raise MeshError(f"marker {mk} given for nonexistent edge {key}")
                edge_markers[lookup[key]] = int(mk)

        for a in (vertices, triangles, regions, edges, tri_edges, tri_edge_sign,
                  edge_tris, edge_markers):
            a.setflags(write=False)
        mesh = cls(vertices, triangles, regions, edges, tri_edges, tri_edge_sign,
                   edge_tris, edge_markers)
        if validate:
            mesh.validate()
        return mesh

    # -- basic geometry --------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def affine_maps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Origins (nT, 2), Jacobians F (nT, 2, 2) and det F (nT,)."""
        p = self.vertices[self.triangles]
        F = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        return p[:, 0], F, det

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_tangents(self) -> np.ndarray:
        """Unit tangents along the global edge orientation."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return d / np.hypot(d[:, 0], d[:, 1])[:, None]

    def outward_normals(self) -> np.ndarray:
        """Unit outward normals (nT, 3, 2) of the local edges."""
        loc = np.array(LOCAL_EDGES)
        p = self.vertices[self.triangles]
        d = p[:, loc[:, 1]] - p[:, loc[:, 0]]
        n = np.stack([d[..., 1], -d[..., 0]], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        # local edge (0, 2) is traversed clockwise
        n[:, 1] *= -1.0
        return n

    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_tris[:, 1] < 0)

    def diameters(self) -> np.ndarray:
        le = self.edge_lengths()
        return le[self.tri_edges].max(axis=1)

    def total_area(self) -> float:
        return float(self.signed_areas().sum())

    def region_areas(self) -> dict[int, float]:
        a = self.signed_areas()
        return {int(r): float(a[self.regions == r].sum()) for r in np.unique(self.regions)}

    def marker_edges(self, markers) -> np.ndarray:
        return np.flatnonzero(np.isin(self.edge_markers, list(markers)))

    def marker_ids(self) -> set[int]:
        return set(int(m) for m in np.unique(self.edge_markers) if m)

    # -- invariants ------------------------------------------------------

    def validate(self) -> None:
        """Check orientation, conformity, markers and the Euler relation."""
        area = self.signed_areas()
        bad = np.flatnonzero(area <= 0.0)
        if len(bad):
            t = int(bad[0])
            raise MeshError(
                f"triangle {t} {tuple(int(v) for v in self.triangles[t])} has "
                f"non-positive signed area {area[t]:.6g}"
            )
        inner = self.edge_tris[:, 1] >= 0
        if inner.any():
            # an interior edge must be traversed in opposite directions
            e = np.flatnonzero(inner)
            t0, t1 = self.edge_tris[e, 0], self.edge_tris[e, 1]
            s0 = self.tri_edge_sign[t0][self.tri_edges[t0] == e[:, None]]
            s1 = self.tri_edge_sign[t1][self.tri_edges[t1] == e[:, None]]
            # local edge (0, 2) runs clockwise, flip it to the CCW sense
            ccw0 = s0 * np.where(np.argmax(self.tri_edges[t0] == e[:, None], axis=1) == 1, -1, 1)
            ccw1 = s1 * np.where(np.argmax(self.tri_edges[t1] == e[:, None], axis=1) == 1, -1, 1)
            clash = np.flatnonzero(ccw0 == ccw1)
            if len(clash):
                k = int(e[clash[0]])
                raise MeshError(f"edge {tuple(self.edges[k])} has inconsistent orientation")
        bnd = ~inner
        unmarked = np.flatnonzero(bnd & (self.edge_markers == 0))
        if len(unmarked):
            k = int(unmarked[0])
            raise MeshError(f"boundary edge {tuple(int(v) for v in self.edges[k])} carries no marker")
        if self.edge_markers.min(initial=0) < 0 or self.edge_markers.max(initial=0) > MAX_MARKER:
            raise MeshError(f"marker ids must lie in 1..{MAX_MARKER}")
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.argmin(used))} belongs to no triangle")
        euler = self.n_vertices - self.n_edges + self.n_triangles
        if euler != 1:
            raise MeshError(
                f"Euler relation V - E + T = {euler} != 1 (non-conforming mesh "
                "or domain not simply connected)"
            )

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        mk = [[int(a), int(b), int(m)] for (a, b), m in zip(self.edges, self.edge_markers) if m]
        return {
            "format": FORMAT,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "regions": self.regions.tolist(),
            "edge_markers": mk,
        }


def save(mesh: Mesh2D, path) -> None:
    Path(path).write_text(json.dumps(mesh.to_dict()), encoding="utf-8")


def from_dict(doc: dict, source: str = "<mesh>") -> Mesh2D:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise MeshError(f"{source}: missing or unsupported format tag (want {FORMAT!r})")
    try:
        verts = np.array(doc["vertices"], dtype=float)
        tris = np.array(doc["triangles"], dtype=np.int64)
        regions = np.array(doc.get("regions", [1] * len(tris)), dtype=np.int64)
        markers = {}
        for i, entry in enumerate(doc.get("edge_markers", [])):
            a, b, m = entry
            markers[(int(a), int(b))] = int(m)
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"{source}: malformed mesh document ({exc})") from None
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise MeshError(f"{source}: vertices must be a list of (x, z) pairs")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError(f"{source}: triangles must be a list of index triples")
    try:
        return Mesh2D.from_arrays(verts, tris, regions, markers)
    except MeshError as exc:
        raise MeshError(f"{source}: {exc}") from None


def load(path) -> Mesh2D:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return from_dict(doc, source=str(path))


# -- constructors ------------------------------------------------------------

def _label_longest_edge(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Rotate each triangle so its longest edge is opposite vertex 0."""
    p = vertices[triangles]
    loc = np.array(LOCAL_EDGES)
    d = p[:, loc[:, 1]] - p[:, loc[:, 0]]
    length2 = (d**2).sum(axis=-1)
    # ties resolved towards the lowest local index, with a relative tolerance
    top = length2.max(axis=1, keepdims=True)
    opp = np.argmax(length2 >= top * (1.0 - 1e-12), axis=1)
    idx = (opp[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def _grid(xs: np.ndarray, zs: np.ndarray):
    nx, nz = len(xs) - 1, len(zs) - 1
    X, Z = np.meshgrid(xs, zs, indexing="xy")
    verts = np.column_stack([X.ravel(), Z.ravel()])
    vid = lambda i, j: j * (nx + 1) + i  # noqa: E731
    tris = []
    cell = []
    for j in range(nz):
        for i in range(nx):
            p00, p10, p11, p01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))
            cell += [(i, j), (i, j)]
    tris = _label_longest_edge(verts, np.array(tris, dtype=np.int64))
    return verts, tris, np.array(cell), vid


def structured_beam_mesh(length: float, ply_thicknesses, nx: int,
                         nz_per_ply: int = 1) -> Mesh2D:
    """Layered beam [0, length] x [-H/2, H/2], plies numbered from the bottom.

    Markers: 1 clamped end (x = 0), 2 top electrode, 3 bottom electrode,
    4 internal electrodes between plies (interior edges), 6 tip (x = length).
    """
    plies = [float(t) for t in ply_thicknesses]
    if not plies:
        raise MeshError("at least one ply is required")
    if min(plies) <= 0.0 or length <= 0.0:
        raise MeshError("beam length and ply thicknesses must be positive")
    if nx < 1 or nz_per_ply < 1:
        raise MeshError("nx and nz_per_ply must be at least 1")
    total = sum(plies)
    zs = [-0.5 * total]
    for t in plies:
        z0 = zs[-1]
        zs += [z0 + t * j / nz_per_ply for j in range(1, nz_per_ply + 1)]
    zs = np.array(zs)
    zs[-1] = 0.5 * total
    xs = np.linspace(0.0, length, nx + 1)
    verts, tris, cell, vid = _grid(xs, zs)
    regions = cell[:, 1] // nz_per_ply + 1
    nz = len(zs) - 1
    markers = {}
    for j in range(nz):
        markers[(vid(0, j), vid(0, j + 1))] = CLAMPED
        markers[(vid(nx, j), vid(nx, j + 1))] = TIP
    for i in range(nx):
        markers[(vid(i, nz), vid(i + 1, nz))] = TOP
        markers[(vid(i, 0), vid(i + 1, 0))] = BOTTOM
        for p in range(1, len(plies)):
            j = p * nz_per_ply
            markers[(vid(i, j), vid(i + 1, j))] = INTERNAL
    return Mesh2D.from_arrays(verts, tris, regions, markers)


def rectangle_mesh(width: float, height: float, nx: int, nz: int,
                   region_of=None) -> Mesh2D:
    """Rectangular unit cell [0, width] x [0, height].

    ``region_of(x, z)`` assigns a material id from a cell centre (default 1).
    Markers: 1 left, 2 right, 3 bottom, 4 top.
    """
    if nx < 1 or nz < 1 or width <= 0.0 or height <= 0.0:
        raise MeshError("invalid rectangle parameters")
    xs = np.linspace(0.0, width, nx + 1)
    zs = np.linspace(0.0, height, nz + 1)
    verts, tris, cell, vid = _grid(xs, zs)
    if region_of is None:
        regions = np.ones(len(tris), dtype=np.int64)
    else:
        cx = 0.5 * (xs[cell[:, 0]] + xs[cell[:, 0] + 1])
        cz = 0.5 * (zs[cell[:, 1]] + zs[cell[:, 1] + 1])
        regions = np.array([int(region_of(x, z)) for x, z in zip(cx, cz)])
    markers = {}
    for j in range(nz):
        markers[(vid(0, j), vid(0, j + 1))] = RVE_LEFT
        markers[(vid(nx, j), vid(nx, j + 1))] = RVE_RIGHT
    for i in range(nx):
        markers[(vid(i, 0), vid(i + 1, 0))] = RVE_BOTTOM
        markers[(vid(i, nz), vid(i + 1, nz))] = RVE_TOP
    return Mesh2D.from_arrays(verts, tris, regions, markers)


# -- refinement --------------------------------------------------------------

def _marker_dict(mesh: Mesh2D) -> dict[tuple[int, int], int]:
    return {(int(a), int(b)): int(m) for (a, b), m in zip(mesh.edges, mesh.edge_markers) if m}


def refine_uniform(mesh: Mesh2D) -> Mesh2D:
    """Split every triangle into four similar children."""
    nV = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    a, b, c = mesh.triangles.T
    # local edge i is opposite vertex i
    m_bc = nV + mesh.tri_edges[:, 0]
    m_ac = nV + mesh.tri_edges[:, 1]
    m_ab = nV + mesh.tri_edges[:, 2]
    children = np.stack([
        np.column_stack([a, m_ab, m_ac]),
        np.column_stack([m_ab, b, m_bc]),
        np.column_stack([m_ac, m_bc, c]),
        np.column_stack([m_bc, m_ac, m_ab]),
    ], axis=1).reshape(-1, 3)
    children = _label_longest_edge(verts, children)
    regions = np.repeat(mesh.regions, 4)
    markers = {}
    for e, m in enumerate(mesh.edge_markers):
        if m:
            p, q = (int(v) for v in mesh.edges[e])
            markers[(p, nV + e)] = int(m)
            markers[(nV + e, q)] = int(m)
    return Mesh2D.from_arrays(verts, children, regions, markers)


def refine_marked(mesh: Mesh2D, marked, max_passes: int = 200) -> Mesh2D:
    """Newest-vertex bisection of ``marked`` triangles with conforming closure."""
    marked = {int(t) for t in marked}
    if not marked:
        return mesh
    if min(marked) < 0 or max(marked) >= mesh.n_triangles:
        raise MeshError("marked triangle id out of range")
    verts = [tuple(v) for v in mesh.vertices.tolist()]
    tris = [tuple(t) for t in mesh.triangles.tolist()]
    regions = mesh.regions.tolist()
    markers = _marker_dict(mesh)
    mid: dict[tuple[int, int], int] = {}

    def key(p, q):
        return (p, q) if p < q else (q, p)

    def midpoint(p, q):
        k = key(p, q)
        m = mid.get(k)
        if m is None:
            m = len(verts)
            verts.append((0.5 * (verts[p][0] + verts[q][0]), 0.5 * (verts[p][1] + verts[q][1])))
            mid[k] = m
            mk = markers.pop(k, 0)
            if mk:
                markers[key(p, m)] = mk
                markers[key(m, q)] = mk
        return m

    todo = marked
    for _ in range(max_passes):
        if not todo:
            break
        new_tris, new_regions = [], []
        for t, (a, b, c) in enumerate(tris):
            if t in todo:
                m = midpoint(b, c)
                new_tris += [(m, a, b), (m, c, a)]
                new_regions += [regions[t], regions[t]]
            else:
                new_tris.append((a, b, c))
                new_regions.append(regions[t])
        tris, regions = new_tris, new_regions
        todo = set()
        for t, (a, b, c) in enumerate(tris):
            if key(a, b) in mid or key(b, c) in mid or key(a, c) in mid:
                todo.add(t)
    else:
        raise MeshError("bisection closure did not terminate")
    return Mesh2D.from_arrays(np.array(verts), np.array(tris, dtype=np.int64),
                              np.array(regions), markers)


def locate(mesh: Mesh2D, points: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and reference coordinates for each point.

    Returns (triangle ids, reference points); -1 for points outside.
    """
    from scipy.spatial import cKDTree

    points = np.atleast_2d(np.asarray(points, dtype=float))
    x0, F, det = mesh.affine_maps()
    Finv = np.linalg.inv(F)
    cent = mesh.centroids()
    tree = cKDTree(cent)
    k = min(16, mesh.n_triangles)
    _, cand = tree.query(points, k=k)
    cand = np.atleast_2d(cand).reshape(len(points), -1)
    tri = -np.ones(len(points), dtype=np.int64)
    ref = np.zeros((len(points), 2))
    best = np.full(len(points), -np.inf)

    def test(pidx, tids):
        xh = np.einsum("nij,nj->ni", Finv[tids], points[pidx] - x0[tids])
        bary = np.column_stack([1.0 - xh.sum(axis=1), xh])
        score = bary.min(axis=1)
        better = score > best[pidx]
        sel = pidx[better]
        best[sel] = score[better]
        tri[sel] = tids[better]
        ref[sel] = xh[better]

    allp = np.arange(len(points))
    for j in range(cand.shape[1]):
        test(allp, cand[:, j])
    miss = np.flatnonzero(best < -tol)
    for p in miss:
        xh = np.einsum("nij,nj->ni", Finv, points[p] - x0)
        score = np.minimum(1.0 - xh.sum(axis=1), xh.min(axis=1))
        t = int(np.argmax(score))
        if score[t] > best[p]:
            best[p], tri[p], ref[p] = score[t], t, xh[t]
    tri[best < -1e-9] = -1
    return tri, ref
