"""Quadrature rules and polynomial bases on the reference triangle.

The reference triangle has vertices (0, 0), (1, 0), (0, 1) and area 1/2.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import eval_legendre, roots_jacobi, roots_legendre

REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

# Local edges as (start, end) local vertex indices; edge i is opposite vertex i.
LOCAL_EDGES = ((1, 2), (0, 2), (0, 1))


@lru_cache(maxsize=None)
def gauss_interval(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule with ``n`` points on [0, 1] (exact to degree 2n-1)."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Jacobi rule on the reference triangle.

    Exact for polynomials of total degree ``degree``. All points lie strictly
    inside the triangle and all weights are positive; weights sum to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    # xi carries the Jacobian factor (1 - xi) of the Duffy map.
    a, wa = roots_jacobi(n, 1.0, 0.0)
    xi = 0.5 * (a + 1.0)
    wxi = wa / 4.0
    eta, weta = gauss_interval(n)
    X, E = np.meshgrid(xi, eta, indexing="ij")
    pts = np.column_stack([X.ravel(), (E * (1.0 - X)).ravel()])
    wts = np.outer(wxi, weta).ravel()
    return pts, wts


def edge_rule(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points on the three reference edges.

    Returns (params, weights, points) with points of shape (3, n, 2); the
    parameter runs from the local start vertex to the local end vertex.
    """
    s, w = gauss_interval(n)
    pts = np.empty((3, n, 2))
    for e, (a, b) in enumerate(LOCAL_EDGES):
        va, vb = REFERENCE_VERTICES[a], REFERENCE_VERTICES[b]
        pts[e] = va + s[:, None] * (vb - va)
    return s, w, pts


def legendre01(j: int, s: np.ndarray) -> np.ndarray:
    """Legendre polynomial of degree ``j`` on [0, 1]; L_j(1-s) = (-1)^j L_j(s)."""
    return eval_legendre(j, 2.0 * np.asarray(s) - 1.0)


def _monomial_exponents(k: int) -> list[tuple[int, int]]:
    return [(d - b, b) for d in range(k + 1) for b in range(d + 1)]


class ScalarPolynomials:
    """L2-orthonormal basis of P^k on the reference triangle.

    Built by Cholesky orthogonalisation of centred monomials taken in order of
    increasing degree, so the first dim(P^j) functions span P^j for every j.
    """

    def __init__(self, k: int):
        self.k = k
        self.exponents = _monomial_exponents(k)
        self.dim = len(self.exponents)
        pts, wts = triangle_rule(2 * k)
        m = self._monomials(pts)[0]
        gram = (m * wts[:, None]).T @ m
        chol = np.linalg.cholesky(gram)
        self._coef = np.linalg.inv(chol)

    def _monomials(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = pts[:, 0] - 1.0 / 3.0
        y = pts[:, 1] - 1.0 / 3.0
        vals = np.empty((len(pts), self.dim))
        grads = np.zeros((len(pts), self.dim, 2))
        for i, (a, b) in enumerate(self.exponents):
            vals[:, i] = x**a * y**b
            if a:
                grads[:, i, 0] = a * x ** (a - 1) * y**b
            if b:
                grads[:, i, 1] = b * x**a * y ** (b - 1)
        return vals, grads

    def eval(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values (npts, dim) and gradients (npts, dim, 2) at reference points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        m, dm = self._monomials(pts)
        vals = m @ self._coef.T
        grads = np.einsum("pmc,nm->pnc", dm, self._coef)
        return vals, grads


@lru_cache(maxsize=None)
def scalar_polynomials(k: int) -> ScalarPolynomials:
    return ScalarPolynomials(k)


def lattice_points(k: int) -> np.ndarray:
    """Equispaced barycentric lattice of order ``k`` (vertices first, then
    edge points per local edge ordered start to end, then interior)."""
    if k == 0:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]])
    pts = [REFERENCE_VERTICES[i] for i in range(3)]
    for a, b in LOCAL_EDGES:
        va, vb = REFERENCE_VERTICES[a], REFERENCE_VERTICES[b]
        for i in range(1, k):
            pts.append(va + (i / k) * (vb - va))
    for j in range(1, k):
        for i in range(1, k - j):
            pts.append(np.array([i / k, j / k]))
    return np.array(pts)
