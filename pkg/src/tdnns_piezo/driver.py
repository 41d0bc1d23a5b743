"""Bimorph convergence, adaptive bimorph and unit-cell homogenization studies.

Every error, rate and average is computed by :mod:`postproc`; this module only
builds meshes and spaces, runs the solves and writes the outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np

from . import mesh as msh
from . import postproc as pp
from .config import ConfigError, StudyConfig
from .fespace import (
    NodalContinuous,
    NormalNormalContinuous,
    TangentialContinuous,
    build_space,
    identify_periodic,
)
from .forms import Boundary, LoadSpec, Spaces, assemble, make_spaces
from .solver import SolverError, dump_matrix, factor, symmetry_error

log = logging.getLogger(__name__)


class StudyError(SolverError):
    """A solve failed inside a study; the message names level and dof count."""


@dataclass
class LevelResult:
    level: int
    ndof: int
    n_triangles: int
    h: float
    l2_error: float
    tip: float
    tip_error: float
    residual: float
    symmetry: float
    marked: int = 0
    clamp_fraction: float = float("nan")


@dataclass
class StudyResult:
    config: StudyConfig
    record: pp.ConvergenceRecord
    levels: list
    reference_tip: float
    solutions: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    uniform: pp.ConvergenceRecord | None = None
    matched_uniform_error: float = float("nan")


@dataclass
class Solved:
    fields: pp.SolutionFields
    ndof: int
    residual: float
    symmetry: float


# -- solves ------------------------------------------------------------------------

def solve_spaces(mesh, spaces: Spaces, materials, loads: LoadSpec, boundary=Boundary(),
                 condense=False, extra_essential=None, level=0, dump=None) -> Solved:
    """Assemble and solve one system; solver failures name the level and size."""
    system = assemble(mesh, spaces, materials, loads, boundary=boundary, condense=condense,
                      extra_essential=extra_essential)
    n = system.n_unknowns
    if dump is not None:
        dump_matrix(system.A, dump)
    try:
        fac = factor(system.A, scaling=system.scaling)
        y = fac.solve(system.b)
    except SolverError as exc:
        raise StudyError(f"level {level} ({n} dofs): {exc}") from exc
    sol = pp.SolutionFields(system, system.expand(y), materials)
    return Solved(sol, n, fac.last_residual, symmetry_error(system.A))


def solve_beam(mesh, formulation, k, k_phi, materials, loads, condense=False, level=0,
               dump=None) -> Solved:
    spaces = make_spaces(mesh, formulation, k, k_phi)
    return solve_spaces(mesh, spaces, materials, loads, condense=condense, level=level, dump=dump)


# -- reference ---------------------------------------------------------------------

_REFERENCE_CACHE: dict = {}


def _reference_key(cfg: StudyConfig):
    m = cfg.mesh
    return (m.length, tuple(m.plies), tuple(sorted(cfg.materials.items())), cfg.plane,
            repr(cfg.loads), astuple(cfg.reference))


def reference_solution(cfg: StudyConfig, materials=None) -> pp.SolutionFields:
    """Primal reference on a fine beam, optionally ZZ-refined; cached per setup."""
    key = _reference_key(cfg)
    if key in _REFERENCE_CACHE:
        return _REFERENCE_CACHE[key]
    materials = materials or cfg.materials2d()
    loads = cfg.loads.to_loadspec()
    r = cfg.reference
    mesh = msh.structured_beam_mesh(cfg.mesh.length, cfg.mesh.plies, r.nx, r.nz)
    for level in range(r.adaptive_levels + 1):
        s = solve_beam(mesh, "primal", r.k, None, materials, loads, level=level)
        log.info("reference level %d: %d dofs, residual %.2e", level, s.ndof, s.residual)
        if level == r.adaptive_levels:
            break
        marked = pp.zz_estimate(s.fields.stress(), fraction=r.fraction).marked
        if len(marked) == 0:
            break
        mesh = msh.refine_marked(mesh, marked)
    _REFERENCE_CACHE[key] = s.fields
    return s.fields


def clear_reference_cache() -> None:
    _REFERENCE_CACHE.clear()


# -- outputs -----------------------------------------------------------------------

def study_label(cfg: StudyConfig) -> str:
    label = f"{cfg.study}_{cfg.formulation}_k{cfg.k}"
    if cfg.k_phi is not None:
        label += f"_kphi{cfg.k_phi}"
    return label


def _out_dir(cfg: StudyConfig, out) -> Path | None:
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def solution_views(sol: pp.SolutionFields) -> dict:
    views = {"displacement": sol.displacement(), "stress": sol.stress()}
    if "phi" in sol.parts:
        views["potential"] = sol.field("phi")
        views["electric_field"] = sol.electric_field()
        views["dielectric_displacement"] = sol.dielectric_displacement()
    return views


def _write_level(cfg: StudyConfig, out: Path | None, level: int, sol: pp.SolutionFields, mesh) -> None:
    if out is None:
        return
    if cfg.output.vtk:
        pp.write_vtk(mesh, solution_views(sol), out / f"level{level}.vtk", cfg.output.subdivision)
    if cfg.study == "bimorph_adaptive" and cfg.output.mesh_snapshots:
        msh.save(mesh, out / f"mesh_level{level}.json")


def _dump_path(out: Path | None, dump: bool, level: int, tag: str = ""):
    if out is None or not dump:
        return None
    return out / f"matrix{tag}_level{level}.txt"


# -- bimorph -----------------------------------------------------------------------

def _bimorph_level(cfg, mesh, level, h, materials, loads, ref, ref_tip, out, dump):
    s = solve_beam(mesh, cfg.formulation, cfg.k, cfg.k_phi, materials, loads, cfg.condense, level,
                   _dump_path(out, dump, level))
    u = s.fields.displacement()
    l2 = pp.l2_error(u, ref.displacement().at_points)
    tip = pp.average_tip_deflection(u)
    tip_err = abs(tip - ref_tip) / abs(ref_tip) if ref_tip != 0.0 else abs(tip)
    res = LevelResult(level, s.ndof, mesh.n_triangles, h, l2, tip, tip_err, s.residual, s.symmetry)
    log.info("level %d: %d dofs, %d triangles, L2 error %.4e, tip %.6e, residual %.2e, "
             "symmetry %.1e", level, s.ndof, mesh.n_triangles, l2, tip, s.residual, s.symmetry)
    return res, s.fields


def run_bimorph(cfg: StudyConfig, out=None, levels: int | None = None, dump: bool = False,
                keep_solutions: bool = False) -> StudyResult:
    """Uniform study: the beam is refined along its length, one level per doubling of nx.

    The thickness resolution (``mesh.nz`` elements per ply) is kept fixed.
    """
    cfg.validate()
    nlev = levels or cfg.levels
    out = _out_dir(cfg, out)
    materials = cfg.materials2d()
    loads = cfg.loads.to_loadspec()
    ref = reference_solution(cfg, materials)
    ref_tip = pp.average_tip_deflection(ref.displacement())
    record = pp.ConvergenceRecord(study_label(cfg))
    result = StudyResult(cfg, record, [], ref_tip)
    for level in range(nlev):
        nx = cfg.mesh.nx * 2 ** level
        mesh = msh.structured_beam_mesh(cfg.mesh.length, cfg.mesh.plies, nx, cfg.mesh.nz)
        res, sol = _bimorph_level(cfg, mesh, level, cfg.mesh.length / nx, materials, loads, ref,
                                  ref_tip, out, dump)
        record.add(res.ndof, res.h, res.l2_error, res.tip_error)
        result.levels.append(res)
        if keep_solutions:
            result.solutions.append(sol)
        _write_level(cfg, out, level, sol, mesh)
    if out is not None and cfg.output.csv:
        pp.write_csv(record, out / f"{record.label}.csv")
    return result


def run_adaptive(cfg: StudyConfig, out=None, levels: int | None = None, dump: bool = False,
                 keep_solutions: bool = False) -> StudyResult:
    """ZZ-driven refinement until the dof budget, the level limit or an empty marking.

    A uniform study on the same initial mesh runs alongside until it passes
    the final adaptive dof count, for the matched-dof comparison.
    """
    cfg.validate()
    nlev = levels or cfg.levels
    out = _out_dir(cfg, out)
    materials = cfg.materials2d()
    loads = cfg.loads.to_loadspec()
    ref = reference_solution(cfg, materials)
    ref_tip = pp.average_tip_deflection(ref.displacement())
    record = pp.ConvergenceRecord(study_label(cfg))
    result = StudyResult(cfg, record, [], ref_tip)
    mesh = msh.structured_beam_mesh(cfg.mesh.length, cfg.mesh.plies, cfg.mesh.nx, cfg.mesh.nz)
    for level in range(nlev):
        res, sol = _bimorph_level(cfg, mesh, level, 0.0, materials, loads, ref, ref_tip, out, dump)
        # graded meshes have no single mesh size; rates are reported against N^(-1/2)
        res.h = 1.0 / math.sqrt(res.ndof)
        zz = pp.zz_estimate(sol.stress(), fraction=cfg.adaptive.fraction)
        res.marked = len(zz.marked)
        if len(zz.marked):
            xc = mesh.centroids()[zz.marked, 0]
            res.clamp_fraction = float(np.mean(xc < cfg.adaptive.clamp_zone * cfg.mesh.length))
        log.info("level %d: eta %.4e, %d marked, clamp fraction %.2f", level, zz.total,
                 res.marked, res.clamp_fraction)
        record.add(res.ndof, res.h, res.l2_error, res.tip_error)
        result.levels.append(res)
        result.meshes.append(mesh)
        if keep_solutions:
            result.solutions.append(sol)
        _write_level(cfg, out, level, sol, mesh)
        if res.ndof >= cfg.adaptive.budget or len(zz.marked) == 0:
            break
        if level + 1 < nlev:
            mesh = msh.refine_marked(mesh, zz.marked)
    if cfg.adaptive.uniform_levels > 0:
        uniform = pp.ConvergenceRecord(study_label(cfg).replace("adaptive", "uniform"))
        final = result.levels[-1].ndof
        level = 0
        while level < cfg.adaptive.uniform_levels or uniform.rows[-1].ndof < final:
            nx = cfg.mesh.nx * 2 ** level
            m = msh.structured_beam_mesh(cfg.mesh.length, cfg.mesh.plies, nx, cfg.mesh.nz)
            res, _ = _bimorph_level(cfg, m, level, cfg.mesh.length / nx, materials, loads, ref,
                                    ref_tip, None, False)
            uniform.add(res.ndof, res.h, res.l2_error, res.tip_error)
            level += 1
        result.uniform = uniform
        result.matched_uniform_error = pp.matched_dof_error(uniform, final)
        log.info("final level: adaptive L2 error %.4e, uniform at %d dofs %.4e",
                 result.levels[-1].l2_error, final, result.matched_uniform_error)
        if out is not None and cfg.output.csv:
            pp.write_csv(uniform, out / f"{uniform.label}.csv")
    if out is not None and cfg.output.csv:
        pp.write_csv(record, out / f"{record.label}.csv")
    return result


# -- homogenization ----------------------------------------------------------------

RVE_ELECTRODES = frozenset({msh.RVE_LEFT, msh.RVE_RIGHT})


@dataclass
class HomogenizationRow:
    level: int
    ndof_shear: int
    ndof_field: int
    constants: pp.EffectiveConstants
    residual: float
    symmetry: float


@dataclass
class HomogenizationResult:
    config: StudyConfig
    rows: list
    phases: dict  # region -> (G13, d15, eps11) of the reduced card

    @property
    def final(self) -> pp.EffectiveConstants:
        return self.rows[-1].constants


def card_constants(m2d) -> tuple[float, float, float]:
    """(G13, d15, eps11 at constant stress) read off a reduced card."""
    return 1.0 / float(m2d.S_E2[2, 2]), float(m2d.d2[0, 2]), float(m2d.eps_sigma2[0, 0])


def rve_mesh(cfg: StudyConfig, level: int = 0) -> msh.Mesh2D:
    m = cfg.mesh
    band = m.band
    region_of = None
    if band is not None:
        z0, z1 = band[0] * m.height, band[1] * m.height
        region_of = lambda x, z: 2 if z0 < z < z1 else 1  # noqa: E731
    return msh.rectangle_mesh(m.width, m.height, m.nx * 2 ** level, m.nz * 2 ** level, region_of)


def _pairing(mesh, slave: int, master: int, along: int) -> dict:
    """Slave edge -> master edge, matched by the edge midpoint coordinate ``along``."""
    mid = lambda e: mesh.vertices[mesh.edges[e]].mean(axis=0)[along]  # noqa: E731
    s = sorted(mesh.marker_edges([slave]), key=mid)
    m = sorted(mesh.marker_edges([master]), key=mid)
    if len(s) != len(m):
        raise ConfigError(f"markers {slave} and {master} have {len(s)} and {len(m)} edges; "
                          "periodic pairing needs matching boundary meshes")
    return {int(a): int(b) for a, b in zip(s, m)}


def _periodic(dm, mesh, shear: float, component=None):
    """Identify right with left and top with bottom; u jumps by the mean shear."""
    w, hgt = np.ptp(mesh.vertices, axis=0)
    lr = _pairing(mesh, msh.RVE_RIGHT, msh.RVE_LEFT, 1)
    tb = _pairing(mesh, msh.RVE_TOP, msh.RVE_BOTTOM, 0)
    # u = shear/2 (z, x): jump (0, shear w/2) across x, (shear h/2, 0) across z
    jlr = np.array([0.0, 0.5 * shear * w])
    jtb = np.array([0.5 * shear * hgt, 0.0])
    if component is None:
        fa = fb = None
        if shear:
            fa = lambda p: np.tile(jlr, (len(p), 1))  # noqa: E731
            fb = lambda p: np.tile(jtb, (len(p), 1))  # noqa: E731
    else:
        fa = lambda p: np.full(len(p), jlr[component])  # noqa: E731
        fb = lambda p: np.full(len(p), jtb[component])  # noqa: E731
    return identify_periodic(identify_periodic(dm, lr, jump=fa), tb, jump=fb)


def _edge_near(mesh, marker: int, point) -> int:
    edges = mesh.marker_edges([marker])
    mids = mesh.vertices[mesh.edges[edges]].mean(axis=1)
    return int(edges[np.argmin(np.linalg.norm(mids - np.asarray(point), axis=1))])


def _pins(spaces: Spaces, mesh, n_modes: int) -> dict:
    """Essential zeros removing translations (2) or all rigid modes (3)."""
    offs = spaces.offsets()
    w = float(np.ptp(mesh.vertices[:, 0]))
    if spaces.formulation == "primal":
        du = spaces.fields["ux"]
        v0 = int(np.argmin(np.linalg.norm(mesh.vertices, axis=1)))
        pins = {offs["ux"] + du.vertex_dof(v0): 0.0, offs["uz"] + du.vertex_dof(v0): 0.0}
        if n_modes == 3:
            v1 = int(np.argmin(np.linalg.norm(mesh.vertices - [w, 0.0], axis=1)))
            pins[offs["uz"] + du.vertex_dof(v1)] = 0.0
        return pins
    du = spaces.fields["u"]
    edges = [_edge_near(mesh, msh.RVE_BOTTOM, (0.0, 0.0)), _edge_near(mesh, msh.RVE_LEFT, (0.0, 0.0))]
    if n_modes == 3:
        edges.append(_edge_near(mesh, msh.RVE_RIGHT, (w, 0.0)))
    return {offs["u"] + int(du.edge_dofs(e)[0][0]): 0.0 for e in edges}


def rve_spaces(mesh, formulation: str, k: int, k_phi: int | None, case: str,
               shear: float = 0.0) -> Spaces:
    """Spaces of the shear case (periodic mechanics) or the field case (free surfaces)."""
    bnd = Boundary(clamped=frozenset(), electrodes=RVE_ELECTRODES)
    spaces = make_spaces(mesh, formulation, k, k_phi, boundary=bnd)
    if case == "field":
        return spaces
    if case != "shear":
        raise ConfigError(f"unknown unit-cell case {case!r}")
    f = dict(spaces.fields)
    if formulation == "primal":
        du = build_space(mesh, NodalContinuous(k), ())
        f["ux"] = _periodic(du, mesh, shear, component=0)
        f["uz"] = _periodic(du, mesh, shear, component=1)
    else:
        f["sigma"] = _periodic(build_space(mesh, NormalNormalContinuous(k), ()), mesh, 0.0)
        f["u"] = _periodic(build_space(mesh, TangentialContinuous(k), ()), mesh, shear)
    return Spaces(formulation, f, spaces.order, spaces.order_phi)


def solve_rve(cfg: StudyConfig, mesh, case: str, materials=None, level: int = 0,
              dump=None) -> Solved:
    materials = materials or cfg.materials2d()
    h = cfg.homogenization
    bnd = Boundary(clamped=frozenset(), electrodes=RVE_ELECTRODES)
    if case == "shear":
        spaces = rve_spaces(mesh, cfg.formulation, cfg.k, cfg.k_phi, "shear", h.shear)
        loads = LoadSpec(phi0={msh.RVE_LEFT: 0.0, msh.RVE_RIGHT: 0.0})
        pins = _pins(spaces, mesh, 2)
    else:
        spaces = rve_spaces(mesh, cfg.formulation, cfg.k, cfg.k_phi, "field")
        loads = LoadSpec(phi0={msh.RVE_LEFT: 0.0, msh.RVE_RIGHT: h.voltage})
        pins = _pins(spaces, mesh, 3)
    return solve_spaces(mesh, spaces, materials, loads, boundary=bnd, condense=cfg.condense,
                        extra_essential=pins, level=level, dump=dump)


def run_homogenization(cfg: StudyConfig, out=None, levels: int | None = None,
                       dump: bool = False) -> HomogenizationResult:
    """Effective (G13, d15, eps11) of the unit cell on successively refined meshes."""
    cfg.validate()
    nlev = levels or cfg.levels
    out = _out_dir(cfg, out)
    materials = cfg.materials2d()
    mesh0 = rve_mesh(cfg)
    regions = sorted(int(r) for r in np.unique(mesh0.regions))
    missing = set(regions) - set(materials)
    if missing:
        raise ConfigError(f"no material for regions {sorted(missing)}")
    phases = {r: card_constants(materials[r]) for r in regions}
    rows = []
    for level in range(nlev):
        mesh = rve_mesh(cfg, level)
        a = solve_rve(cfg, mesh, "shear", materials, level, _dump_path(out, dump, level, "_shear"))
        b = solve_rve(cfg, mesh, "field", materials, level, _dump_path(out, dump, level, "_field"))
        c = pp.homogenized_constants(a.fields, b.fields)
        row = HomogenizationRow(level, a.ndof, b.ndof, c, max(a.residual, b.residual),
                                max(a.symmetry, b.symmetry))
        rows.append(row)
        log.info("level %d: %d + %d dofs, G13 %.10e, d15 %.10e, eps11 %.10e, residual %.2e",
                 level, a.ndof, b.ndof, c.G13, c.d15, c.eps11, row.residual)
        if out is not None and cfg.output.vtk:
            pp.write_vtk(mesh, solution_views(a.fields), out / f"shear_level{level}.vtk",
                         cfg.output.subdivision)
            pp.write_vtk(mesh, solution_views(b.fields), out / f"field_level{level}.vtk",
                         cfg.output.subdivision)
    result = HomogenizationResult(cfg, rows, phases)
    if out is not None and cfg.output.csv:
        write_constants_csv(result, out / f"{study_label(cfg)}.csv")
    return result


def write_constants_csv(result: HomogenizationResult, path) -> None:
    lines = ["level,ndof_shear,ndof_field,G13,d15,eps11,residual"]
    for r in result.rows:
        c = r.constants
        lines.append(",".join([str(r.level), str(r.ndof_shear), str(r.ndof_field)]
                              + ["%.17g" % v for v in (c.G13, c.d15, c.eps11, r.residual)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run(cfg: StudyConfig, out=None, levels: int | None = None, dump: bool = False):
    """Dispatch on ``cfg.study``."""
    if cfg.study == "bimorph_uniform":
        return run_bimorph(cfg, out, levels, dump)
    if cfg.study == "bimorph_adaptive":
        return run_adaptive(cfg, out, levels, dump)
    if cfg.study == "homogenization":
        return run_homogenization(cfg, out, levels, dump)
    raise ConfigError(f"unknown study {cfg.study!r}")


# -- embedded acceptance checks -----------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


RATE_THRESHOLD = {1: 1.8, 2: 2.7, 3: 3.6}
STAGNATION_RATIO = 1.3
SYMMETRY_TOL = 1e-12
RESIDUAL_TOL = 1e-10
IDENTITY_TOL = 1e-8


def _system_checks(levels) -> list:
    sym = max(r.symmetry for r in levels)
    res = max(r.residual for r in levels)
    return [Check("symmetry", sym <= SYMMETRY_TOL, f"max {sym:.2e} (tol {SYMMETRY_TOL:.0e})"),
            Check("residual", res <= RESIDUAL_TOL, f"max {res:.2e} (tol {RESIDUAL_TOL:.0e})")]


def check_result(result) -> list:
    """Assertions matching the study kind; each returns a named pass/fail line."""
    cfg = result.config
    if isinstance(result, HomogenizationResult):
        out = _system_checks(result.rows)
        c = result.final
        got = (c.G13, c.d15, c.eps11)
        names = ("G13", "d15", "eps11")
        if len(result.phases) == 1:
            ref = next(iter(result.phases.values()))
            for n, g, r in zip(names, got, ref):
                err = abs(g - r) / max(abs(r), 1e-300) if r != 0.0 else abs(g)
                ok = err <= IDENTITY_TOL if r != 0.0 else err <= IDENTITY_TOL * 1e-9
                out.append(Check(f"identity {n}", ok, f"{g:.10e} vs card {r:.10e}"))
        else:
            for i, n in enumerate(names):
                vals = [p[i] for p in result.phases.values()]
                lo, hi = min(vals), max(vals)
                out.append(Check(f"bounds {n}", lo < got[i] < hi, f"{lo:.4e} < {got[i]:.4e} < {hi:.4e}"))
        return out
    out = _system_checks(result.levels)
    rec = result.record
    if cfg.study == "bimorph_uniform":
        if cfg.formulation == "v1" and cfg.k == 1 and cfg.k_phi == 1:
            ratios = rec.ratios()[2:]
            ok = len(ratios) > 0 and bool(np.all(ratios < STAGNATION_RATIO))
            out.append(Check("stagnation", ok, "ratios after level 2: "
                             + ", ".join(f"{r:.3f}" for r in ratios)))
        else:
            rate = rec.rows[-1].rate if len(rec.rows) > 1 else float("nan")
            thr = RATE_THRESHOLD.get(cfg.k, 0.9 * (cfg.k + 1))
            out.append(Check("L2 rate", bool(rate >= thr), f"last rate {rate:.3f} (need {thr})"))
    else:
        if len(result.levels) > 3:
            f = result.levels[3].clamp_fraction
            out.append(Check("clamp concentration", bool(f >= 0.5),
                             f"level-3 marked fraction near the clamp {f:.2f}"))
        e_a = result.levels[-1].l2_error
        e_u = result.matched_uniform_error
        out.append(Check("adaptive vs uniform", bool(e_a < e_u),
                         f"{e_a:.4e} vs uniform {e_u:.4e} at {result.levels[-1].ndof} dofs"))
    return out
