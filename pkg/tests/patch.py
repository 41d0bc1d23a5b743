"""Homogeneous manufactured states for patch tests.

The exact solution has constant strain (a, 0, b) and constant electric field
E0, so u = (a x, b x) vanishes on the clamped left side (marker 1) and the
remaining sides carry the exact traction, charge and potential.
"""

import numpy as np

from tdnns_piezo import mesh as msh
from tdnns_piezo import postproc as pp
from tdnns_piezo.driver import solve_spaces
from tdnns_piezo.forms import Boundary, LoadSpec, make_spaces

BOUNDARY = Boundary(clamped=frozenset({1}), electrodes=frozenset({3, 4}))
NORMALS = {1: (-1.0, 0.0), 2: (1.0, 0.0), 3: (0.0, -1.0), 4: (0.0, 1.0)}


class PatchState:
    def __init__(self, material, strain, E0):
        self.material = material
        self.strain = np.asarray(strain, float)
        self.E0 = np.asarray(E0, float)
        self.sigma = material.C_E2 @ self.strain - material.e2.T @ self.E0
        self.D = material.e2 @ self.strain + material.eps_eps2 @ self.E0

    def u(self, p):
        p = np.atleast_2d(p)
        a, _, b = self.strain
        return np.column_stack([a * p[:, 0], b * p[:, 0]])

    def phi(self, p):
        return -np.atleast_2d(p) @ self.E0

    def loads(self, electric: bool = True) -> LoadSpec:
        s = self.sigma
        t_nn, t_nt, q0 = {}, {}, {}
        for mk, (nx, nz) in NORMALS.items():
            sn = np.array([s[0] * nx + s[2] * nz, s[2] * nx + s[1] * nz])
            t_nn[mk] = float(sn @ (nx, nz))
            t_nt[mk] = float(sn @ (-nz, nx))
            q0[mk] = float(self.D @ (nx, nz))
        del t_nn[1], t_nt[1]
        if not electric:
            return LoadSpec(t_nn=t_nn, t_nt=t_nt)
        return LoadSpec(t_nn=t_nn, t_nt=t_nt, q0={1: q0[1], 2: q0[2]},
                        phi0={3: self.phi, 4: self.phi})


def patch_mesh(aspect: float, n: int = 3) -> msh.Mesh2D:
    """n-by-n grid whose cells have width/height ratio ``aspect``."""
    return msh.rectangle_mesh(1.0, 1.0 / aspect, n, n)


def patch_errors(mesh, formulation: str, k: int, state: PatchState, k_phi=None) -> dict:
    """Relative L2 errors of every solved field against the exact state."""
    spaces = make_spaces(mesh, formulation, k, k_phi, boundary=BOUNDARY)
    electric = formulation != "tdnns_elastic"
    solved = solve_spaces(mesh, spaces, state.material, state.loads(electric), boundary=BOUNDARY)
    sol = solved.fields
    const = lambda v: (lambda p: np.tile(v, (len(np.atleast_2d(p)), 1)))  # noqa: E731
    out = {}

    def rel(view, exact, scale):
        return pp.l2_error(view, exact) / (scale * np.sqrt(mesh.total_area()))

    strain_scale = np.abs(state.material.S_E2 @ state.sigma).max()
    out["u"] = rel(sol.displacement(), state.u, strain_scale)
    out["sigma"] = rel(sol.stress(), const(state.sigma), np.abs(state.sigma).max())
    if electric:
        field_scale = np.abs(state.E0).max() + np.abs(state.material.g2 @ state.sigma).max()
        out["E"] = rel(sol.electric_field(), const(state.E0), field_scale)
        out["D"] = rel(sol.dielectric_displacement(), const(state.D), np.abs(state.D).max())
    out["symmetry"] = solved.symmetry
    out["residual"] = solved.residual
    return out
