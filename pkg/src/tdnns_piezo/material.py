"""Piezoelectric constitutive data in e-, d- and g-form.

Voigt ordering is (11, 22, 33, 23, 13, 12) in 3D and (11, 33, 13) in the
x1-x3 modelling plane, with engineering shear strains. All quantities are SI.

The three forms are

    e-form:  sigma = C_E eps - e^T E,          D = e eps + eps_eps E
    d-form:  eps   = S_E sigma + d^T E,        D = d sigma + eps_sigma E
    g-form:  eps   = S_D sigma + g^T D,        E = -g sigma + eps_sigma^-1 D

with d = e S_E, eps_sigma = eps_eps + d e^T, g = eps_sigma^-1 d and
S_D = S_E - d^T g.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS0 = 8.8541878128e-12  # vacuum permittivity [F/m]

# 3D Voigt indices kept by the x1-x3 reduction, and kept field components.
PLANE_VOIGT = [0, 2, 4]
PLANE_FIELD = [0, 2]


class MaterialError(ValueError):
    """Raised for unphysical or malformed material data."""


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _require_spd(name: str, a: np.ndarray) -> None:
    if not np.allclose(a, a.T, rtol=1e-12, atol=0.0):
        raise MaterialError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(_sym(a))
    if w[0] <= 0.0:
        raise MaterialError(
            f"{name} is not positive definite (smallest eigenvalue {w[0]:.6g})"
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MaterialForms:
    """All three parameter sets of one piezoelectric material (3D Voigt)."""

    C_E: np.ndarray
    S_E: np.ndarray
    S_D: np.ndarray
    e: np.ndarray
    d: np.ndarray
    g: np.ndarray
    eps_eps: np.ndarray
    eps_sigma: np.ndarray
    name: str = field(default="", compare=False)

    def relation_residuals(self) -> dict[str, float]:
        """Relative Frobenius residuals of the connecting relations."""
        return _relation_residuals(self)


@dataclass(frozen=True)
class Material2D:
    """Plane (x1-x3) material: Voigt (11, 33, 13), field components (1, 3)."""

    C_E2: np.ndarray
    S_E2: np.ndarray
    S_D2: np.ndarray
    e2: np.ndarray
    d2: np.ndarray
    g2: np.ndarray
    eps_eps2: np.ndarray
    eps_sigma2: np.ndarray
    name: str = field(default="", compare=False)

    @property
    def eps_sigma2_inv(self) -> np.ndarray:
        return np.linalg.inv(self.eps_sigma2)

    # aliases so the residual helper treats both dimensions alike
    C_E = property(lambda self: self.C_E2)
    S_E = property(lambda self: self.S_E2)
    S_D = property(lambda self: self.S_D2)
    e = property(lambda self: self.e2)
    d = property(lambda self: self.d2)
    g = property(lambda self: self.g2)
    eps_eps = property(lambda self: self.eps_eps2)
    eps_sigma = property(lambda self: self.eps_sigma2)

    def relation_residuals(self) -> dict[str, float]:
        return _relation_residuals(self)

    def shear_modulus(self) -> float:
        """G13 = 1 / S^E_55 of the plane card."""
        return 1.0 / self.S_E2[2, 2]

    def d15(self) -> float:
        return self.d2[0, 2]

    def eps11_sigma(self) -> float:
        return self.eps_sigma2[0, 0]


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _relation_residuals(m) -> dict[str, float]:
    n = m.C_E.shape[0]
    ident = np.eye(n)
    return {
        "S_E*C_E=I": float(np.linalg.norm(m.S_E @ m.C_E - ident) / np.sqrt(n)),
        "d=e*S_E": _rel(m.d, m.e @ m.S_E),
        "eps_sigma=eps_eps+d*e^T": _rel(m.eps_sigma, m.eps_eps + m.d @ m.e.T),
        "g=eps_sigma^-1*d": _rel(m.g, np.linalg.solve(m.eps_sigma, m.d)),
        "S_D=S_E-d^T*g": _rel(m.S_D, m.S_E - m.d.T @ m.g),
    }


def _complete_from_e(C_E, e, eps_eps):
    S_E = _sym(np.linalg.inv(C_E))
    d = e @ S_E
    eps_sigma = _sym(eps_eps + d @ e.T)
    g = np.linalg.solve(eps_sigma, d)
    S_D = _sym(S_E - d.T @ g)
    return S_E, d, eps_sigma, g, S_D


def _complete_from_d(S_E, d, eps_sigma):
    C_E = _sym(np.linalg.inv(S_E))
    e = d @ C_E
    eps_eps = _sym(eps_sigma - d @ e.T)
    g = np.linalg.solve(eps_sigma, d)
    S_D = _sym(S_E - d.T @ g)
    return C_E, e, eps_eps, g, S_D


def from_e_form(C_E, e, eps_eps, name: str = "") -> MaterialForms:
    """Build all forms from elasticity at constant field, e and eps_eps."""
    C_E = np.asarray(C_E, dtype=float)
    e = np.asarray(e, dtype=float)
    eps_eps = np.asarray(eps_eps, dtype=float)
    if C_E.shape != (6, 6) or e.shape != (3, 6) or eps_eps.shape != (3, 3):
        raise MaterialError("expected C_E 6x6, e 3x6, eps_eps 3x3")
    _require_spd("C_E", C_E)
    _require_spd("eps_eps", eps_eps)
    S_E, d, eps_sigma, g, S_D = _complete_from_e(C_E, e, eps_eps)
    _require_spd("S_D", S_D)
    return MaterialForms(
        C_E=_frozen(C_E), S_E=_frozen(S_E), S_D=_frozen(S_D), e=_frozen(e),
        d=_frozen(d), g=_frozen(g), eps_eps=_frozen(eps_eps),
        eps_sigma=_frozen(eps_sigma), name=name,
    )


def from_d_form(S_E, d, eps_sigma, name: str = "") -> MaterialForms:
    """Build all forms from compliance at constant field, d and eps_sigma."""
    S_E = np.asarray(S_E, dtype=float)
    d = np.asarray(d, dtype=float)
    eps_sigma = np.asarray(eps_sigma, dtype=float)
    if S_E.shape != (6, 6) or d.shape != (3, 6) or eps_sigma.shape != (3, 3):
        raise MaterialError("expected S_E 6x6, d 3x6, eps_sigma 3x3")
    _require_spd("S_E", S_E)
    _require_spd("eps_sigma", eps_sigma)
    C_E, e, eps_eps, g, S_D = _complete_from_d(S_E, d, eps_sigma)
    _require_spd("eps_eps", eps_eps)
    _require_spd("S_D", S_D)
    return MaterialForms(
        C_E=_frozen(C_E), S_E=_frozen(S_E), S_D=_frozen(S_D), e=_frozen(e),
        d=_frozen(d), g=_frozen(g), eps_eps=_frozen(eps_eps),
        eps_sigma=_frozen(eps_sigma), name=name,
    )


def to_d_form(m: MaterialForms) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.array(m.S_E), np.array(m.d), np.array(m.eps_sigma)


def to_e_form(m: MaterialForms) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.array(m.C_E), np.array(m.e), np.array(m.eps_eps)


def isotropic(Y: float, nu: float, eps_rel: float, name: str = "") -> MaterialForms:
    """Decoupled isotropic material from Young's modulus and Poisson ratio."""
    if Y <= 0.0:
        raise MaterialError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise MaterialError(f"Poisson ratio {nu} outside (-1, 0.5)")
    if eps_rel <= 0.0:
        raise MaterialError("relative permittivity must be positive")
    lam = Y * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = Y / (2.0 * (1.0 + nu))
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[[0, 1, 2], [0, 1, 2]] = lam + 2.0 * mu
    C[[3, 4, 5], [3, 4, 5]] = mu
    return from_e_form(C, np.zeros((3, 6)), eps_rel * EPS0 * np.eye(3), name=name)


def transversely_isotropic_e(C11, C12, C13, C33, C44, C66, e31, e33, e15,
                             eps11_rel, eps33_rel, name: str = "") -> MaterialForms:
    """6mm card poled along x3, given in e-form."""
    C = np.zeros((6, 6))
    C[0, 0] = C[1, 1] = C11
    C[2, 2] = C33
    C[0, 1] = C[1, 0] = C12
    C[0, 2] = C[2, 0] = C[1, 2] = C[2, 1] = C13
    C[3, 3] = C[4, 4] = C44
    C[5, 5] = C66
    e = np.zeros((3, 6))
    e[2, 0] = e[2, 1] = e31
    e[2, 2] = e33
    e[0, 4] = e[1, 3] = e15
    eps = EPS0 * np.diag([eps11_rel, eps11_rel, eps33_rel])
    return from_e_form(C, e, eps, name=name)


def transversely_isotropic_d(S11, S12, S13, S33, S44, S66, d31, d33, d15,
                             eps11_rel, eps33_rel, name: str = "") -> MaterialForms:
    """6mm card poled along x3, given in d-form (permittivity at constant stress)."""
    S = np.zeros((6, 6))
    S[0, 0] = S[1, 1] = S11
    S[2, 2] = S33
    S[0, 1] = S[1, 0] = S12
    S[0, 2] = S[2, 0] = S[1, 2] = S[2, 1] = S13
    S[3, 3] = S[4, 4] = S44
    S[5, 5] = S66
    d = np.zeros((3, 6))
    d[2, 0] = d[2, 1] = d31
    d[2, 2] = d33
    d[0, 4] = d[1, 3] = d15
    eps = EPS0 * np.diag([eps11_rel, eps11_rel, eps33_rel])
    return from_d_form(S, d, eps, name=name)


def pzt5() -> MaterialForms:
    """PZT-5 card used for the bimorph benchmark."""
    return transversely_isotropic_e(
        C11=120e9, C12=75.2e9, C13=75.1e9, C33=111e9, C44=21.1e9, C66=22.6e9,
        e31=-5.35, e33=15.8, e15=12.3, eps11_rel=919.0, eps33_rel=827.0,
        name="PZT-5",
    )


def sonox_p502() -> MaterialForms:
    """SONOX P502 card (d-form)."""
    return transversely_isotropic_d(
        S11=18.5e-12, S12=-6.29e-12, S13=-6.23e-12, S33=20.7e-12,
        S44=33.2e-12, S66=52.3e-12, d31=-1.85e-10, d33=4.40e-10, d15=5.60e-10,
        eps11_rel=1950.0, eps33_rel=1850.0, name="SONOX P502",
    )


def epoxy() -> MaterialForms:
    return isotropic(2.5e9, 0.42, 4.25, name="Epoxy")


def reduce_to_plane(m: MaterialForms, poling_axis: str = "x3",
                    mode: str = "plane_strain") -> Material2D:
    """Reduce to the x1-x3 plane.

    Plane strain deletes the out-of-plane strain components and E_2 from the
    e-form; plane stress deletes the out-of-plane stresses and D_2 from the
    d-form. The remaining forms are regenerated in reduced dimension.
    """
    if poling_axis != "x3":
        raise MaterialError("only poling along x3 is supported")
    iv, jf = np.ix_(PLANE_VOIGT, PLANE_VOIGT), np.ix_(PLANE_FIELD, PLANE_VOIGT)
    kf = np.ix_(PLANE_FIELD, PLANE_FIELD)
    if mode == "plane_strain":
        C_E2 = _sym(np.asarray(m.C_E)[iv])
        e2 = np.asarray(m.e)[jf]
        eps_eps2 = _sym(np.asarray(m.eps_eps)[kf])
        S_E2, d2, eps_sigma2, g2, S_D2 = _complete_from_e(C_E2, e2, eps_eps2)
    elif mode == "plane_stress":
        S_E2 = _sym(np.asarray(m.S_E)[iv])
        d2 = np.asarray(m.d)[jf]
        eps_sigma2 = _sym(np.asarray(m.eps_sigma)[kf])
        C_E2, e2, eps_eps2, g2, S_D2 = _complete_from_d(S_E2, d2, eps_sigma2)
    else:
        raise MaterialError(f"unknown reduction mode {mode!r}")
    return Material2D(
        C_E2=_frozen(C_E2), S_E2=_frozen(S_E2), S_D2=_frozen(S_D2),
        e2=_frozen(e2), d2=_frozen(d2), g2=_frozen(g2),
        eps_eps2=_frozen(eps_eps2), eps_sigma2=_frozen(eps_sigma2), name=m.name,
    )


# --- material card files -------------------------------------------------

_E_KEYS = {"C11", "C12", "C13", "C33", "C44", "C66", "e31", "e33", "e15",
           "eps11_rel", "eps33_rel"}
_D_KEYS = {"S11", "S12", "S13", "S33", "S44", "S66", "d31", "d33", "d15",
           "eps11_rel", "eps33_rel"}
_ISO_KEYS = {"Y", "nu", "eps_rel"}
_OPTIONAL = {"name"}


def parse_card(text: str, source: str = "<card>") -> MaterialForms:
    """Parse a ``key = value`` material card.

    The card type is recognised from its key set: elasticity constants ``C..``
    (e-form, permittivity at constant strain), compliances ``S..`` (d-form,
    permittivity at constant stress) or ``Y, nu, eps_rel`` (isotropic).
    """
    values: dict[str, float] = {}
    name = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MaterialError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values or (key == "name" and name):
            raise MaterialError(f"{source}:{lineno}: duplicate key {key!r}")
        if key == "name":
            name = val.strip("\"'")
            continue
        if key not in _E_KEYS | _D_KEYS | _ISO_KEYS:
            raise MaterialError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise MaterialError(f"{source}:{lineno}: bad number {val!r}") from None
    keys = set(values)
    for kind, required in (("e", _E_KEYS), ("d", _D_KEYS), ("iso", _ISO_KEYS)):
        if keys == required:
            break
    else:
        raise MaterialError(
            f"{source}: key set {sorted(keys)} matches no card type "
            "(e-form, d-form or isotropic)"
        )
    if kind == "e":
        return transversely_isotropic_e(name=name, **values)
    if kind == "d":
        return transversely_isotropic_d(name=name, **values)
    return isotropic(values["Y"], values["nu"], values["eps_rel"], name=name)


def load_card(path) -> MaterialForms:
    path = Path(path)
    return parse_card(path.read_text(encoding="utf-8"), source=str(path))


def format_card_e(m: MaterialForms) -> str:
    """Write the 6mm e-form keys of ``m`` as a card (17 significant digits)."""
    C, e, eps = m.C_E, m.e, m.eps_eps
    vals = {
        "C11": C[0, 0], "C12": C[0, 1], "C13": C[0, 2], "C33": C[2, 2],
        "C44": C[3, 3], "C66": C[5, 5], "e31": e[2, 0], "e33": e[2, 2],
        "e15": e[0, 4], "eps11_rel": eps[0, 0] / EPS0, "eps33_rel": eps[2, 2] / EPS0,
    }
    lines = [f"name = {m.name}"] if m.name else []
    lines += [f"{k} = {v:.17g}" for k, v in vals.items()]
    return "\n".join(lines) + "\n"
