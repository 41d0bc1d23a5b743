"""Direct solution of the assembled saddle-point systems.

Systems are symmetrically equilibrated, factored by SuperLU with a
fill-reducing ordering and solved with iterative refinement. Every solve
checks its normwise backward error on the equilibrated system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
REFINE_TOL = 1e-15


class SolverError(RuntimeError):
    pass


class SingularMatrixError(SolverError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def as_csr(A) -> sp.csr_matrix:
    """Row-compressed copy with sorted, unique column indices."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def is_structurally_symmetric(A: sp.csr_matrix) -> bool:
    P = A.copy()
    P.data = np.ones_like(P.data)
    return (P - P.T).count_nonzero() == 0


def symmetry_error(A) -> float:
    """max |A - A^T| / max |A|."""
    A = sp.csr_matrix(A)
    if A.nnz == 0:
        return 0.0
    D = (A - A.T).tocoo()
    num = np.abs(D.data).max() if D.nnz else 0.0
    return float(num / np.abs(A.data).max())


def ruiz_scaling(A: sp.csr_matrix, iters: int = 8) -> np.ndarray:
    """Symmetric diagonal scaling d with rows/cols of D A D near unit max."""
    n = A.shape[0]
    d = np.ones(n)
    B = A.tocsr(copy=True)
    for _ in range(iters):
        r = np.sqrt(abs(B).max(axis=1).toarray().ravel())
        r[r == 0.0] = 1.0
        s = 1.0 / r
        d *= s
        S = sp.diags(s)
        B = S @ B @ S
        if np.all(np.abs(r - 1.0) < 1e-3):
            break
    return d


def saddle_scaling(A: sp.csr_matrix) -> np.ndarray:
    """Symmetric diagonal scaling for saddle-point matrices.

    Dofs with a nonzero diagonal get ``1/sqrt|a_ii|``; dofs with a zero
    diagonal (multipliers) are scaled so their largest coupling to the
    scaled primary dofs is one. Unlike Ruiz this respects the physical
    scale of the compliance block, which is what conditions the system.
    """
    A = as_csr(A)
    diag = np.abs(A.diagonal())
    has = diag > 0.0
    d = np.ones(A.shape[0])
    d[has] = 1.0 / np.sqrt(diag[has])
    zero = np.flatnonzero(~has)
    if len(zero):
        C = abs(sp.diags(d * has) @ A[:, zero]).max(axis=0).toarray().ravel()
        d[zero] = np.where(C > 0, 1.0 / np.where(C > 0, C, 1.0), 1.0)
    return d


def _locate_singularity(A: sp.csr_matrix) -> int | None:
    counts = np.diff(A.indptr)
    nz = np.flatnonzero(counts == 0)
    if len(nz):
        return int(nz[0])
    colnz = np.bincount(A.indices, minlength=A.shape[1])
    if np.any(colnz == 0):
        return int(np.flatnonzero(colnz == 0)[0])
    if A.shape[0] <= 3000:
        _, _, U = sla.lu(A.toarray())
        piv = np.abs(np.diag(U))
        tol = piv.max() * A.shape[0] * np.finfo(float).eps
        bad = np.flatnonzero(piv <= tol)
        if len(bad):
            return int(bad[0])
    return None


@dataclass
class Factorization:
    A: sp.csr_matrix
    scale: np.ndarray
    lu: object
    perm_r: np.ndarray = field(repr=False)
    perm_c: np.ndarray = field(repr=False)
    refine_steps: int = 20
    last_residual: float = 0.0
    _norm_scaled: float | None = field(default=None, repr=False)
    _A_ext: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.A.shape

    def residual(self, x: np.ndarray, b: np.ndarray) -> float:
        """Normwise backward error of the equilibrated system.

        ``|r|_inf / (|A|_inf |x|_inf + |b|_inf)`` with rows and unknowns
        scaled by ``scale``; max over right-hand-side columns.
        """
        d = self.scale if b.ndim == 1 else self.scale[:, None]
        if self._norm_scaled is None:
            S = sp.diags(self.scale)
            self._norm_scaled = float(abs(S @ self.A @ S).sum(axis=1).max())
        r = np.abs(d * (b - self.A @ x)).max(axis=0)
        den = self._norm_scaled * np.abs(x / d).max(axis=0) + np.abs(d * b).max(axis=0)
        return float(np.max(r / np.where(den > 0, den, 1.0)))

    def solve(self, b: np.ndarray, tol: float = RESIDUAL_TOL) -> np.ndarray:
        """Solve A x = b with iterative refinement; enforce the residual bound.

        Residuals are accumulated in extended precision so that refinement
        improves the forward error, not only the backward error.
        """
        b = np.asarray(b, dtype=float)
        if not np.any(b):
            self.last_residual = 0.0
            return np.zeros_like(b)
        d = self.scale if b.ndim == 1 else self.scale[:, None]
        x = d * self.lu.solve(d * b)
        if self._A_ext is None:
            self._A_ext = self.A.astype(np.longdouble)
        xl = x.astype(np.longdouble)
        bl = b.astype(np.longdouble)
        prev = np.inf
        for _ in range(self.refine_steps):
            r = (bl - self._A_ext @ xl).astype(float)
            dx = d * self.lu.solve(d * r)
            xl = xl + dx
            # compare in equilibrated unknowns; raw fields differ by many decades
            step = float(np.abs(dx / d).max() / np.abs(xl / d).max())
            if step <= REFINE_TOL or step > 0.5 * prev:
                break
            prev = step
        x = xl.astype(float)
        res = self.residual(x, b)
        self.last_residual = res
        if not res <= tol:
            raise SolverError(f"relative residual {res:.3e} exceeds {tol:.0e}")
        return x


def factor(A, ordering: str = "MMD_ATA", scaling: str = "saddle") -> Factorization:
    """Sparse LU with partial pivoting after symmetric equilibration.

    ``scaling="saddle"`` suits uncondensed saddle-point systems; condensed
    systems (Schur complements with no zero diagonal) use ``"ruiz"``.
    """
    A = as_csr(A)
    n, m = A.shape
    if n != m:
        raise SolverError(f"matrix must be square, got {n}x{m}")
    if n == 0:
        raise SolverError("empty system")
    if scaling == "saddle":
        d = saddle_scaling(A)
        d *= ruiz_scaling(sp.diags(d) @ A @ sp.diags(d), iters=2)
    elif scaling == "ruiz":
        d = ruiz_scaling(A, iters=20)
    else:
        raise SolverError(f"unknown scaling {scaling!r}")
    S = sp.diags(d)
    B = (S @ A @ S).tocsc()
    try:
        lu = spla.splu(B, permc_spec=ordering, diag_pivot_thresh=0.1,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        idx = _locate_singularity(A)
        where = f" at pivot/row {idx}" if idx is not None else ""
        raise SingularMatrixError(
            f"matrix is singular{where} (check essential boundary conditions): {exc}", idx
        ) from None
    diagU = np.abs(lu.U.diagonal())
    if diagU.min() <= diagU.max() * 1e-15 * n:
        k = int(np.argmin(diagU))
        raise SingularMatrixError(
            f"matrix is numerically singular at pivot {int(lu.perm_c[k]) if k < n else k}", k
        )
    return Factorization(A, d, lu, lu.perm_r, lu.perm_c)


def solve(A, b) -> np.ndarray:
    return factor(A).solve(b)


# -- static condensation -----------------------------------------------------

@dataclass
class Condensation:
    """Per-element data to recover interior dofs after the global solve."""

    interior: np.ndarray  # local positions of interior dofs
    boundary: np.ndarray  # local positions of the remaining dofs
    Kinv_Kib: np.ndarray  # (nT, ni, nb)
    Kinv_fi: np.ndarray  # (nT, ni)

    def recover(self, x_boundary_local: np.ndarray) -> np.ndarray:
        """Interior values (nT, ni) from boundary values (nT, nb)."""
        return self.Kinv_fi - np.einsum("tij,tj->ti", self.Kinv_Kib, x_boundary_local)


def _batched_saddle_scaling(K: np.ndarray) -> np.ndarray:
    """saddle_scaling applied to a stack of dense blocks (nT, n, n)."""
    diag = np.abs(np.diagonal(K, axis1=1, axis2=2))
    has = diag > 0.0
    d = np.where(has, 1.0 / np.sqrt(np.where(has, diag, 1.0)), 1.0)
    C = (np.abs(K) * (d * has)[:, :, None]).max(axis=1)
    C = np.where(C > 0, C, 1.0)
    return np.where(has, d, 1.0 / C)


def static_condense(K: np.ndarray, f: np.ndarray, interior) -> tuple[np.ndarray, np.ndarray, Condensation]:
    """Schur complements of element blocks onto their non-interior dofs.

    Returns full-size element blocks whose interior rows/columns are zero, the
    condensed element vectors, and recovery data.
    """
    K = np.asarray(K, dtype=float)
    f = np.asarray(f, dtype=float)
    nloc = K.shape[1]
    mask = np.zeros(nloc, dtype=bool)
    mask[np.asarray(interior, dtype=int)] = True
    ii = np.flatnonzero(mask)
    bb = np.flatnonzero(~mask)
    if len(ii) == 0:
        empty = Condensation(ii, bb, np.zeros((len(K), 0, len(bb))), np.zeros((len(K), 0)))
        return K, f, empty
    Kii = K[:, ii][:, :, ii]
    Kib = K[:, ii][:, :, bb]
    Kbi = K[:, bb][:, :, ii]
    rhs = np.concatenate([Kib, f[:, ii, None]], axis=2)
    # equilibrate each interior block like the global saddle-point system
    d = _batched_saddle_scaling(Kii)
    Ks = d[:, :, None] * Kii * d[:, None, :]
    cond = np.linalg.cond(Ks)
    if np.any(~np.isfinite(cond)) or cond.max() > 1e14:
        t = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise SolverError(f"interior block of element {t} is singular (scaled cond {cond[t]:.2e})")
    # one refinement step and the Schur products in extended precision
    rs = (d[:, :, None] * rhs).astype(np.longdouble)
    y = np.linalg.solve(Ks, rs.astype(float)).astype(np.longdouble)
    y += np.linalg.solve(Ks, (rs - Ks.astype(np.longdouble) @ y).astype(float))
    sol = d[:, :, None] * y
    Kbi_l = Kbi.astype(np.longdouble)
    Kinv_Kib, Kinv_fi = sol[:, :, :-1], sol[:, :, -1]
    Kc = np.zeros_like(K)
    fc = np.zeros_like(f)
    Kc[np.ix_(np.arange(len(K)), bb, bb)] = K[:, bb][:, :, bb] - Kbi_l @ Kinv_Kib
    fc[:, bb] = f[:, bb] - np.einsum("tij,tj->ti", Kbi_l, Kinv_fi)
    Kinv_Kib, Kinv_fi = Kinv_Kib.astype(float), Kinv_fi.astype(float)
    return Kc, fc, Condensation(ii, bb, Kinv_Kib, Kinv_fi)


# -- output --------------------------------------------------------------------

def dump_matrix(A, path) -> None:
    """Write ``i j value`` lines (0-based) for an external cross-check."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"% {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for i, j, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")


def load_matrix(path) -> sp.csr_matrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    n, m, _ = (int(v) for v in lines[0].lstrip("% ").split())
    rows, cols, vals = [], [], []
    for line in lines[1:]:
        i, j, v = line.split()
        rows.append(int(i))
        cols.append(int(j))
        vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, m))


def solve_system(system, factorization: Factorization | None = None):
    """Solve an assembled block system; returns (full coefficients, factorization)."""
    fac = factorization or factor(system.A, scaling=system.scaling)
    y = fac.solve(system.b)
    return system.expand(y), fac
