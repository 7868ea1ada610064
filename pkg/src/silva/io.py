"""CSV, polygon and legacy-VTK writers, plus the matching readers.

Floats are written with 17 significant digits so that a write/read/write
cycle reproduces the file byte for byte.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .integrator import ParticleState, StepDiagnostics
from .voronoi import VoronoiMesh, format_mesh_dump

__all__ = [
    "SNAPSHOT_HEADER",
    "DIAGNOSTICS_HEADER",
    "OutputError",
    "fmt",
    "write_snapshot",
    "read_snapshot",
    "write_diagnostics",
    "read_diagnostics",
    "write_mesh_dump",
    "write_vtk",
    "write_table",
    "read_table",
]

SNAPSHOT_HEADER = ("id", "x", "y", "u", "v", "p", "rho", "vol")
DIAGNOSTICS_HEADER = ("step", "t", "dt", "E", "div_l2", "div_max", "minres_iters", "outer_iters")


class OutputError(OSError):
    """An output file could not be written or read back."""


def fmt(x) -> str:
    """Exact text form: strings and integers as-is, floats with 17 digits."""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # newline="" keeps "\n" on every platform
        with open(path, "w", newline="", encoding="ascii") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _read_lines(path) -> list[str]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def write_table(path, header: Sequence[str], columns: Sequence[Iterable]) -> Path:
    """Column-oriented CSV; every column must have the same length."""
    cols = [list(c) for c in columns]
    if len(cols) != len(header):
        raise ValueError(f"{len(header)} header fields but {len(cols)} columns")
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    lines = [",".join(header)]
    for k in range(n):
        lines.append(",".join(fmt(c[k]) for c in cols))
    return _write_text(path, "\n".join(lines) + "\n")


def read_table(path) -> dict[str, np.ndarray]:
    lines = _read_lines(path)
    if not lines:
        raise OutputError(f"{path} is empty")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    for k, row in enumerate(rows):
        if len(row) != len(header):
            raise OutputError(f"{path}:{k + 2}: expected {len(header)} fields, got {len(row)}")
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        try:
            out[name] = np.array([int(v) for v in vals], dtype=np.int64)
        except ValueError:
            try:
                out[name] = np.array([float(v) for v in vals], dtype=float)
            except ValueError:
                out[name] = np.array(vals, dtype=object)
    return out


def write_snapshot(state: ParticleState, path, mesh: Optional[VoronoiMesh] = None) -> Path:
    """Particle CSV ``id,x,y,u,v,p,rho,vol``.

    ``vol`` is the geometric cell volume of ``mesh`` (default: the state's
    own mesh) or the reference volume when no mesh is attached.
    """
    mesh = mesh if mesh is not None else state.mesh
    vol = mesh.volume if mesh is not None else state.ref_volume
    n = state.x.shape[0]
    cols = [
        range(n),
        state.x[:, 0], state.x[:, 1],
        state.v[:, 0], state.v[:, 1],
        state.p, state.rho, vol,
    ]
    return write_table(path, SNAPSHOT_HEADER, cols)


def _typed(data: dict, ints: Sequence[str]) -> dict[str, np.ndarray]:
    # an all-integral float column (rho = 1, say) parses as int otherwise
    return {k: v.astype(np.int64 if k in ints else float) for k, v in data.items()}


def read_snapshot(path) -> dict[str, np.ndarray]:
    data = read_table(path)
    if tuple(data) != SNAPSHOT_HEADER:
        raise OutputError(f"{path}: unexpected header {','.join(data)}")
    return _typed(data, ints=("id",))


def write_diagnostics(diagnostics: Iterable[StepDiagnostics], path) -> Path:
    diags = list(diagnostics)
    cols = [
        [d.step for d in diags],
        [d.t for d in diags],
        [d.dt for d in diags],
        [d.energy for d in diags],
        [d.div_l2 for d in diags],
        [d.div_max for d in diags],
        [d.minres_iters for d in diags],
        [d.outer_iters for d in diags],
    ]
    return write_table(path, DIAGNOSTICS_HEADER, cols)


def read_diagnostics(path) -> dict[str, np.ndarray]:
    data = read_table(path)
    if tuple(data) != DIAGNOSTICS_HEADER:
        raise OutputError(f"{path}: unexpected header {','.join(data)}")
    return _typed(data, ints=("step", "minres_iters", "outer_iters"))


def write_mesh_dump(mesh: VoronoiMesh, path) -> Path:
    return _write_text(path, format_mesh_dump(mesh))


def write_vtk(state: ParticleState, mesh: VoronoiMesh, path, title: str = "silva") -> Path:
    """ASCII legacy-VTK polydata: one polygon per cell with point-wise fields as cell data."""
    n = mesh.n
    verts = mesh.vertices
    counts = np.diff(mesh.vert_ptr)
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {len(verts)} double",
    ]
    lines += [f"{fmt(a)} {fmt(b)} 0" for a, b in verts]
    lines.append(f"POLYGONS {n} {int(counts.sum() + n)}")
    for i in range(n):
        lo, hi = mesh.vert_ptr[i], mesh.vert_ptr[i + 1]
        lines.append(" ".join([str(hi - lo)] + [str(k) for k in range(lo, hi)]))
    lines.append(f"CELL_DATA {n}")
    for name, vals in (("p", state.p), ("rho", state.rho), ("vol", mesh.volume)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [fmt(x) for x in vals]
    lines.append("VECTORS velocity double")
    lines += [f"{fmt(a)} {fmt(b)} 0" for a, b in state.v]
    return _write_text(path, "\n".join(lines) + "\n")
