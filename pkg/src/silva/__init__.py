"""Semi-implicit Lagrangian Voronoi solver for 2D incompressible flow."""
import os as _os

import numba as _numba

# The bundled TBB is often too old and numba warns every time it falls back.
if "NUMBA_THREADING_LAYER" not in _os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in _os.environ:
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .voronoi import DomainBox, MeshError, VoronoiMesh, build_mesh  # noqa: E402
from .pressure import SolverError, assemble_B, assemble_rhs, solve_pressure  # noqa: E402
from .integrator import BoundarySpec, ParticleState, StepConfig, Wall, run, silva_step  # noqa: E402
from .benchmarks import CASES, make_case, run_case  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "DomainBox",
    "MeshError",
    "VoronoiMesh",
    "build_mesh",
    "SolverError",
    "assemble_B",
    "assemble_rhs",
    "solve_pressure",
    "BoundarySpec",
    "ParticleState",
    "StepConfig",
    "Wall",
    "run",
    "silva_step",
    "CASES",
    "make_case",
    "run_case",
]
