"""Mixed finite elements for two-dimensional linear piezoelasticity."""

from . import config, driver, fespace, forms, material, mesh, postproc, solver
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "config", "driver", "fespace", "forms", "material", "mesh", "postproc",
           "solver", "__version__"]
