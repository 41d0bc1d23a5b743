"""Command-line entry point: ``tdnns-piezo run <config>`` and mesh emission."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import driver
from . import mesh as msh
from .solver import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("tdnns_piezo")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdnns-piezo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a study from a TOML config")
    r.add_argument("config", type=Path)
    r.add_argument("--levels", type=int, default=None, help="override the number of levels")
    r.add_argument("--out", type=Path, default=None, help="output directory (default from config)")
    r.add_argument("--check", action="store_true", help="run the embedded acceptance assertions")
    r.add_argument("--dump-matrix", action="store_true", help="write each system matrix as text")
    m = sub.add_parser("mesh", help="write a structured beam or unit-cell mesh as JSON")
    m.add_argument("output", type=Path)
    m.add_argument("--rve", action="store_true", help="rectangular unit cell instead of a beam")
    m.add_argument("--length", type=float, default=0.1)
    m.add_argument("--plies", type=float, nargs="+", default=[5e-4, 5e-4])
    m.add_argument("--width", type=float, default=1e-3)
    m.add_argument("--height", type=float, default=1e-3)
    m.add_argument("--nx", type=int, default=10)
    m.add_argument("--nz", type=int, default=1)
    c = sub.add_parser("config", help="print a default config for a study kind")
    c.add_argument("study", choices=cfgmod.STUDIES)
    return p


def _setup_logging(out: Path | None) -> None:
    log.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in log.handlers):
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(fmt)
        log.addHandler(sh)
    for h in [h for h in log.handlers if isinstance(h, logging.FileHandler)]:
        log.removeHandler(h)
        h.close()
    if out is not None:
        fh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
        fh.setFormatter(fmt)
        log.addHandler(fh)


def default_config(study: str) -> cfgmod.StudyConfig:
    cfg = cfgmod.StudyConfig(study=study)
    if study == "bimorph_uniform":
        cfg.loads.phi0 = {2: 75.0, 3: 75.0, 4: 0.0}
    elif study == "bimorph_adaptive":
        cfg.formulation, cfg.k, cfg.levels = "v2", 2, 8
        cfg.mesh.nx = 80
        cfg.loads.phi0 = {2: 75.0, 3: 75.0, 4: 0.0}
        cfg.reference.k, cfg.reference.nx, cfg.reference.adaptive_levels = 4, 160, 12
    else:
        cfg.formulation, cfg.levels = "v2", 2
        cfg.mesh.nx = cfg.mesh.nz = 8
        cfg.materials = {1: "sonox_p502"}
    return cfg.validate()


def cmd_run(args) -> int:
    try:
        cfg = cfgmod.load(args.config)
        if args.levels is not None and args.levels < 1:
            raise cfgmod.ConfigError("--levels must be at least 1")
        out = args.out or Path(cfg.output.dir)
        if not out.is_absolute() and args.out is None:
            out = args.config.parent / out
        out.mkdir(parents=True, exist_ok=True)
        _setup_logging(out)
        log.info("study %s, formulation %s, k=%s, k_phi=%s", cfg.study, cfg.formulation, cfg.k, cfg.k_phi)
        result = driver.run(cfg, out, args.levels, args.dump_matrix)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    status = EXIT_OK
    if args.check:
        for c in driver.check_result(result):
            line = f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}"
            print(line)
            log.info(line)
            if not c.passed:
                status = EXIT_CHECK
    return status


def cmd_mesh(args) -> int:
    try:
        if args.rve:
            m = msh.rectangle_mesh(args.width, args.height, args.nx, args.nz)
        else:
            m = msh.structured_beam_mesh(args.length, args.plies, args.nx, args.nz)
    except msh.MeshError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    msh.save(m, args.output)
    print(f"{m.n_vertices} vertices, {m.n_triangles} triangles -> {args.output}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "mesh":
        return cmd_mesh(args)
    print(cfgmod.dumps(default_config(args.study)), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
