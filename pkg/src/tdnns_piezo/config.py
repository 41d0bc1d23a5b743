"""Declarative study configuration with TOML input and output.

Unset optional values are omitted from the TOML text; marker and region keys
are integers in memory and strings in the file.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import material as mat
from .forms import LoadSpec

STUDIES = ("bimorph_uniform", "bimorph_adaptive", "homogenization")
STUDY_FORMULATIONS = ("primal", "v1", "v2", "v2_divfree")
BUILTIN_MATERIALS = {"pzt5": mat.pzt5, "sonox_p502": mat.sonox_p502, "epoxy": mat.epoxy}
MAX_MIXED_ORDER = 3


class ConfigError(ValueError):
    pass


@dataclass
class MeshConfig:
    """Beam (``length``, ``plies``, ``nz`` per ply) or unit cell (``width``, ``height``, ``nz``)."""

    length: float = 0.1
    plies: list = field(default_factory=lambda: [5e-4, 5e-4])
    width: float = 1e-3
    height: float = 1e-3
    nx: int = 64
    nz: int = 1
    # z-range of region 2 in a unit cell as fractions of the height; None = one material
    band: list | None = None


@dataclass
class LoadsConfig:
    phi0: dict = field(default_factory=dict)
    t_nn: dict = field(default_factory=dict)
    t_nt: dict = field(default_factory=dict)
    q0: dict = field(default_factory=dict)
    body_force: list = field(default_factory=lambda: [0.0, 0.0])

    def to_loadspec(self) -> LoadSpec:
        return LoadSpec(body_force=tuple(self.body_force), t_nn=dict(self.t_nn),
                        t_nt=dict(self.t_nt), q0=dict(self.q0), phi0=dict(self.phi0))


@dataclass
class ReferenceConfig:
    """Primal reference: order ``k`` on an nx-by-nz beam, then ZZ-adaptive levels."""

    k: int = 3
    nx: int = 2048
    nz: int = 2
    adaptive_levels: int = 0
    fraction: float = 0.3


@dataclass
class AdaptiveConfig:
    budget: int = 100_000
    fraction: float = 0.5
    # part of the beam length, measured from the clamp, used for the location audit
    clamp_zone: float = 0.1
    # levels of the uniform comparison study (nx doubled each level)
    uniform_levels: int = 2


@dataclass
class HomogenizationConfig:
    shear: float = 1e-3
    voltage: float = 1.0


@dataclass
class OutputConfig:
    dir: str = "out"
    csv: bool = True
    vtk: bool = False
    subdivision: int = 2
    mesh_snapshots: bool = True


@dataclass
class StudyConfig:
    study: str = "bimorph_uniform"
    formulation: str = "v2"
    k: int = 1
    k_phi: int | None = None
    levels: int = 5
    condense: bool = False
    plane: str = "plane_strain"
    mesh: MeshConfig = field(default_factory=MeshConfig)
    # region id -> builtin material name or card path
    materials: dict = field(default_factory=lambda: {1: "pzt5", 2: "pzt5"})
    loads: LoadsConfig = field(default_factory=LoadsConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    homogenization: HomogenizationConfig = field(default_factory=HomogenizationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    # directory that relative card paths are resolved against
    base_dir: str = field(default=".", compare=False, repr=False)

    def validate(self) -> "StudyConfig":
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r} (expected one of {', '.join(STUDIES)})")
        if self.formulation not in STUDY_FORMULATIONS:
            raise ConfigError(f"unknown formulation {self.formulation!r}")
        check_orders(self.formulation, self.k, self.k_phi)
        if self.levels < 1:
            raise ConfigError("at least one refinement level is required")
        if self.mesh.nx < 1 or self.mesh.nz < 1:
            raise ConfigError("mesh.nx and mesh.nz must be positive")
        if self.plane not in ("plane_strain", "plane_stress"):
            raise ConfigError(f"unknown plane reduction {self.plane!r}")
        if not 0.0 < self.adaptive.fraction <= 1.0 or not 0.0 < self.reference.fraction <= 1.0:
            raise ConfigError("marking fractions must lie in (0, 1]")
        if self.adaptive.budget < 1:
            raise ConfigError("adaptive.budget must be positive")
        if self.output.subdivision < 1:
            raise ConfigError("output.subdivision must be >= 1")
        if self.mesh.band is not None:
            z0, z1 = self.mesh.band
            if not 0.0 <= z0 < z1 <= 1.0:
                raise ConfigError("mesh.band must satisfy 0 <= z0 < z1 <= 1")
        if not self.materials:
            raise ConfigError("no materials given")
        return self

    def material(self, region: int) -> mat.MaterialForms:
        try:
            src = self.materials[region]
        except KeyError:
            raise ConfigError(f"no material for region {region}") from None
        if src in BUILTIN_MATERIALS:
            return BUILTIN_MATERIALS[src]()
        path = Path(src)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        try:
            return mat.load_card(path)
        except OSError as exc:
            raise ConfigError(f"cannot read material card {src!r}: {exc}") from None
        except mat.MaterialError as exc:
            raise ConfigError(str(exc)) from None

    def materials2d(self) -> dict:
        return {r: mat.reduce_to_plane(self.material(r), mode=self.plane) for r in self.materials}


def check_orders(formulation: str, k: int, k_phi: int | None) -> None:
    """Reject (formulation, k, k_phi) combinations the spaces do not support."""
    if formulation == "primal":
        if not 1 <= k <= 6 or (k_phi is not None and not 1 <= k_phi <= 6):
            raise ConfigError("primal orders must lie in 1..6")
        return
    if not 1 <= k <= MAX_MIXED_ORDER:
        raise ConfigError(f"mixed order k={k} unsupported (allowed 1..{MAX_MIXED_ORDER})")
    if formulation == "v1" and k_phi is not None and not 1 <= k_phi <= MAX_MIXED_ORDER:
        raise ConfigError("V1 needs a continuous potential of order 1..3")
    if formulation == "v2" and k_phi is not None and k_phi != k - 1:
        raise ConfigError(f"full V2 of order {k} pairs with a discontinuous potential of order {k - 1}")
    if formulation == "v2_divfree" and k_phi not in (None, 0):
        raise ConfigError("the divergence-free variant uses a piecewise constant potential")


# -- TOML ------------------------------------------------------------------------

_SECTIONS = {
    "mesh": MeshConfig,
    "loads": LoadsConfig,
    "reference": ReferenceConfig,
    "adaptive": AdaptiveConfig,
    "homogenization": HomogenizationConfig,
    "output": OutputConfig,
}
_INT_KEYED = {"phi0", "t_nn", "t_nt", "q0"}


def _coerce(cls, name: str, value, where: str):
    f = {f.name: f for f in fields(cls)}[name]
    typ = str(f.type)
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if typ.startswith("int"):
        if value is None and "None" in typ:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if typ == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true or false")
    if typ == "str" and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    if name in _INT_KEYED:
        return _int_keys(value, where, float)
    if name in ("plies", "body_force", "band"):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers")
        return [float(v) for v in value]
    return value


def _int_keys(table, where: str, conv):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    out = {}
    for key, v in table.items():
        try:
            ik = int(key)
        except ValueError:
            raise ConfigError(f"{where}: key {key!r} is not an integer id") from None
        if conv is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{where}.{key}: expected a number")
        out[ik] = conv(v)
    return out


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{where}]: unknown keys {sorted(unknown)}")
    return cls(**{k: _coerce(cls, k, v, f"{where}.{k}") for k, v in table.items()})


def from_dict(doc: dict, base_dir=".") -> StudyConfig:
    top = {f.name for f in fields(StudyConfig)} - {"base_dir"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kw = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key == "materials":
            kw[key] = _int_keys(value, "materials", str)
        else:
            kw[key] = _coerce(StudyConfig, key, value, key)
    return StudyConfig(**kw, base_dir=str(base_dir)).validate()


def _strip(value):
    if isinstance(value, dict):
        return {str(k): _strip(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_strip(v) for v in value]
    return value


def to_dict(cfg: StudyConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("base_dir")
    return _strip(doc)


def dumps(cfg: StudyConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str, base_dir=".") -> StudyConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(doc, base_dir)


def load(path) -> StudyConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return loads(text, base_dir=path.parent)


def save(cfg: StudyConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
