"""One semi-implicit Lagrangian step and the time loop around it.

A step advects the seeds with the old velocity, regenerates the mesh at the
new positions, adds explicit viscous and body forces, solves for the
pressure and corrects the velocity with the stabilized pressure gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import operators as ops
from .pressure import (
    SolveRecord,
    assemble_B,
    assemble_rhs,
    solve_pressure,
    solve_pressure_multiphase,
)
from .voronoi import (
    WALL_NAMES,
    DomainBox,
    VoronoiMesh,
    build_mesh,
)

__all__ = [
    "Wall",
    "BoundarySpec",
    "ParticleState",
    "StepConfig",
    "StepDiagnostics",
    "RunResult",
    "compute_dt",
    "viscous_and_body_forces",
    "kinetic_energy",
    "silva_step",
    "initial_state",
    "run",
]

log = logging.getLogger(__name__)

FREE_SLIP = "free_slip"
NO_SLIP = "no_slip"
DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class Wall:
    kind: str = FREE_SLIP
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in (FREE_SLIP, NO_SLIP, DIRICHLET):
            raise ValueError(f"unknown wall condition {self.kind!r}")
        if self.kind == NO_SLIP and any(self.velocity):
            raise ValueError("no-slip wall has zero velocity; use a Dirichlet wall")

    @classmethod
    def free_slip(cls) -> "Wall":
        return cls(FREE_SLIP)

    @classmethod
    def no_slip(cls) -> "Wall":
        return cls(NO_SLIP)

    @classmethod
    def dirichlet(cls, u: float, v: float) -> "Wall":
        return cls(DIRICHLET, (float(u), float(v)))

    @property
    def has_mirror(self) -> bool:
        return self.kind != FREE_SLIP

    @property
    def mirror_velocity(self) -> np.ndarray:
        return np.zeros(2) if self.kind == NO_SLIP else np.asarray(self.velocity, dtype=float)


@dataclass(frozen=True)
class BoundarySpec:
    """One condition per wall, ordered (xmin, xmax, ymin, ymax), plus gravity."""

    walls: tuple[Wall, Wall, Wall, Wall] = (Wall(), Wall(), Wall(), Wall())
    gravity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.walls) != 4:
            raise ValueError("exactly one condition per wall is required")

    @classmethod
    def uniform(cls, wall: Wall, gravity=(0.0, 0.0)) -> "BoundarySpec":
        return cls((wall,) * 4, tuple(gravity))

    def wall(self, name: str) -> Wall:
        return self.walls[WALL_NAMES.index(name)]


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    rho: np.ndarray
    mass: np.ndarray
    ref_volume: np.ndarray
    t: float = 0.0
    step: int = 0
    mesh: Optional[VoronoiMesh] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return replace(
            self,
            x=self.x.copy(),
            v=self.v.copy(),
            p=self.p.copy(),
            rho=self.rho.copy(),
            mass=self.mass.copy(),
            ref_volume=self.ref_volume.copy(),
        )


@dataclass(frozen=True)
class StepConfig:
    domain: DomainBox
    delta_r: float
    nu: float = 0.0
    boundary: BoundarySpec = BoundarySpec()
    cfl: float = 0.1
    safety: float = 0.25
    dt_max: float = math.inf
    v_ref: float = 1.0
    tol: float = 1e-9
    max_iter: Optional[int] = None
    stabilize: bool = True
    outer_tol: float = 1e-12
    max_outer: int = 100
    inner_solver: str = "direct"
    inner_tol: float = 1e-10


@dataclass
class StepDiagnostics:
    step: int
    t: float
    dt: float
    energy: float
    div_l2: float
    div_max: float
    div_l2_star: float
    minres_iters: int
    outer_iters: int
    mesh_time: float
    volume_drift_min: float
    volume_drift_max: float
    escaped: int = 0
    increment: float = 0.0


@dataclass
class RunResult:
    state: ParticleState
    mesh: VoronoiMesh
    diagnostics: list[StepDiagnostics]
    snapshot_steps: list[int]


def kinetic_energy(volume, rho, v) -> float:
    """``E = 1/2 sum_i |w_i| rho_i |v_i|^2``."""
    v = np.asarray(v, dtype=float)
    return 0.5 * float(np.sum(volume * rho * np.einsum("ij,ij->i", v, v)))


def compute_dt(state: ParticleState, config: StepConfig) -> float:
    """Advective CFL bound, capped by explicit-viscosity stability and ``dt_max``."""
    dr = config.delta_r
    if not dr > 0:
        raise ValueError(f"delta_r must be positive, got {dr}")
    vmax = float(np.sqrt((state.v**2).sum(axis=1)).max()) if state.n else 0.0
    dt = config.cfl * dr / max(vmax, config.v_ref)
    if config.nu > 0:
        dt = min(dt, config.safety * dr * dr / config.nu)
    return min(dt, config.dt_max)


def _reflect_into(x: np.ndarray, domain: DomainBox) -> int:
    """Mirror escaped seeds back across the violated wall; returns how many moved."""
    lo = np.array([domain.xmin, domain.ymin])
    hi = np.array([domain.xmax, domain.ymax])
    below = x <= lo
    above = x >= hi
    moved = int(np.any(below | above, axis=1).sum())
    if moved:
        x[:] = np.where(below, 2 * lo - x, x)
        x[:] = np.where(above, 2 * hi - x, x)
        # pathological overshoot: keep strictly inside
        span = hi - lo
        x[:] = np.clip(x, lo + 1e-9 * span, hi - 1e-9 * span)
    return moved


def viscous_and_body_forces(
    mesh: VoronoiMesh,
    v: np.ndarray,
    boundary: BoundarySpec,
    nu: float,
    dt: float,
) -> np.ndarray:
    """Intermediate velocity ``v* = v + dt (nu <lap v> + g)``.

    No-slip and Dirichlet walls act through a mirrored neighbour at distance
    ``2 dist(x_i, wall)`` carrying ``2 v_D - v_i``; free-slip walls add no
    friction.
    """
    v = np.asarray(v, dtype=float)
    force = np.broadcast_to(np.asarray(boundary.gravity, dtype=float), v.shape).copy()
    if nu > 0:
        lap = ops.laplacian(mesh, v)
        if mesh.wall_cell.size:
            lap += _mirror_laplacian(mesh, v, boundary)
        force += nu * lap
    return v + dt * force


def _mirror_laplacian(mesh: VoronoiMesh, v: np.ndarray, boundary: BoundarySpec) -> np.ndarray:
    n = mesh.n
    out = np.zeros((n, 2))
    cells = mesh.wall_cell
    for w in range(4):
        wall = boundary.walls[w]
        if not wall.has_mirror:
            continue
        sel = mesh.wall_id == w
        if not np.any(sel):
            continue
        i = cells[sel]
        r = 2.0 * mesh.domain.wall_distance(mesh.positions[i], w)
        coef = mesh.wall_len[sel] / r
        mirror = 2.0 * wall.mirror_velocity[None, :] - v[i]
        vij = v[i] - mirror
        for k in range(2):
            out[:, k] -= np.bincount(i, weights=coef * vij[:, k], minlength=n)
    return out / mesh.volume[:, None]


def _div_l2(mesh: VoronoiMesh, v) -> tuple[float, float]:
    div = ops.weak_divergence(mesh, v)
    return float(np.sqrt(np.sum(mesh.volume * div * div))), float(np.abs(div).max())


def initial_state(x, v, p, rho, config: StepConfig) -> ParticleState:
    """Wrap initial fields, building the first mesh for volumes and masses."""
    x = np.array(x, dtype=float).reshape(-1, 2)
    n = x.shape[0]
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (n,)).copy()
    if not np.all(rho > 0):
        raise ValueError("density must be positive")
    mesh = build_mesh(x, config.domain, config.delta_r)
    return ParticleState(
        x=x,
        v=np.array(v, dtype=float).reshape(n, 2),
        p=np.broadcast_to(np.asarray(p, dtype=float), (n,)).copy(),
        rho=rho,
        mass=rho * mesh.volume,
        ref_volume=mesh.volume.copy(),
        mesh=mesh,
    )


def silva_step(
    state: ParticleState,
    config: StepConfig,
    dt: Optional[float] = None,
) -> tuple[ParticleState, StepDiagnostics]:
    """Advance ``state`` by one step; the input state is not modified."""
    if dt is None:
        dt = compute_dt(state, config)
    # 1. explicit trajectory update
    x = state.x + dt * state.v
    escaped = _reflect_into(x, config.domain)
    if escaped:
        log.warning("step %d: %d seed(s) left the domain and were reflected", state.step + 1, escaped)
    # 2. mesh regeneration, warm-started from the previous neighbours
    mesh = build_mesh(x, config.domain, config.delta_r, previous=state.mesh)
    # 3. explicit viscous and body forces
    v_star = viscous_and_body_forces(mesh, state.v, config.boundary, config.nu, dt)
    # 4. implicit pressure
    records: list[SolveRecord] = []
    rho = state.rho
    if np.all(rho == rho[0]):
        B = assemble_B(mesh, rho[0])
        b = assemble_rhs(mesh, v_star, dt)
        p = solve_pressure(B, -b, tol=config.tol, max_iter=config.max_iter, x0=state.p, log_to=records)
    else:
        p = solve_pressure_multiphase(
            mesh, rho, v_star, dt, p_prev=state.p,
            tol_outer=config.outer_tol, max_outer=config.max_outer,
            inner=config.inner_solver, inner_tol=config.inner_tol, log_to=records,
        )
    # 5. velocity correction
    grad = ops.stabilized_gradient(mesh, p) if config.stabilize else ops.strong_gradient(mesh, p)
    v = v_star - (dt / rho)[:, None] * grad

    new = ParticleState(
        x=x, v=v, p=p, rho=state.rho, mass=state.mass, ref_volume=state.ref_volume,
        t=state.t + dt, step=state.step + 1, mesh=mesh,
    )
    div_l2, div_max = _div_l2(mesh, v)
    div_star, _ = _div_l2(mesh, v_star)
    drift = (mesh.volume - state.ref_volume) / state.ref_volume
    rec = records[-1] if records else SolveRecord(0, 0.0)
    diag = StepDiagnostics(
        step=new.step,
        t=new.t,
        dt=dt,
        energy=kinetic_energy(mesh.volume, rho, v),
        div_l2=div_l2,
        div_max=div_max,
        div_l2_star=div_star,
        minres_iters=rec.iterations,
        outer_iters=rec.outer_iterations,
        mesh_time=mesh.build_time,
        volume_drift_min=float(drift.min()),
        volume_drift_max=float(drift.max()),
        escaped=escaped,
        increment=rec.increment,
    )
    return new, diag


def run(
    state: ParticleState,
    config: StepConfig,
    t_end: float,
    snapshot_steps: Optional[int] = None,
    snapshot_interval: Optional[float] = None,
    on_snapshot: Optional[Callable[[ParticleState], None]] = None,
    on_step: Optional[Callable[[ParticleState, StepDiagnostics], None]] = None,
    max_steps: Optional[int] = None,
) -> RunResult:
    """Step from ``state.t`` to ``t_end``; the last step is shortened to land on it.

    Snapshots are emitted for the initial state, every ``snapshot_steps``
    steps and/or every ``snapshot_interval`` of simulated time, and at the
    final time.
    """
    if state.mesh is None:
        state = replace(state, mesh=build_mesh(state.x, config.domain, config.delta_r))
    diags: list[StepDiagnostics] = []
    snaps: list[int] = []

    def snap(s: ParticleState):
        snaps.append(s.step)
        if on_snapshot is not None:
            on_snapshot(s)

    snap(state)
    next_snap_t = state.t + snapshot_interval if snapshot_interval else math.inf
    tiny = 1e-12 * max(1.0, abs(t_end))
    while state.t < t_end - tiny:
        if max_steps is not None and state.step >= max_steps:
            break
        remaining = t_end - state.t
        dt = compute_dt(state, config)
        last = dt >= remaining - tiny
        state, diag = silva_step(state, config, remaining if last else dt)
        if last:
            # land exactly on t_end despite accumulated rounding
            state.t = diag.t = t_end
        diags.append(diag)
        if on_step is not None:
            on_step(state, diag)
        due = snapshot_steps and state.step % snapshot_steps == 0
        if state.t >= next_snap_t - tiny:
            due = True
            while next_snap_t <= state.t + tiny:
                next_snap_t += snapshot_interval
        if due and state.t < t_end - tiny:
            snap(state)
    if not snaps or snaps[-1] != state.step:
        snap(state)
    return RunResult(state=state, mesh=state.mesh, diagnostics=diags, snapshot_steps=snaps)
