"""Benchmark cases: initial data, reference solutions, error norms, studies.

Four cases are provided: the decaying Taylor-Green vortex, the stationary
Gresho vortex, the lid-driven cavity and a two-phase Rayleigh-Taylor
column.  Lengths and velocities are dimensionless (``U0 = L0 = 1``) so
``nu = 1 / Re`` and gravity has magnitude ``1 / Fr**2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from . import operators as ops
from .integrator import (
    BoundarySpec,
    ParticleState,
    RunResult,
    StepConfig,
    Wall,
    initial_state,
    kinetic_energy,
    run,
)
from .voronoi import DomainBox, VoronoiMesh

__all__ = [
    "CASES",
    "CaseSpec",
    "NoReferenceError",
    "ErrorEntry",
    "ErrorReport",
    "make_case",
    "seed_positions",
    "init_case",
    "exact_solution",
    "exact_energy",
    "error_norms",
    "convergence_study",
    "fit_order",
    "run_case",
    "step_config",
    "ghia_re100",
    "sample_velocity",
    "cavity_centerlines",
    "gresho_profile",
    "gresho_velocity",
    "gresho_pressure",
    "tangential_profile",
    "min_neighbor_distance",
    "heavy_center_of_mass",
]

CASES = ("taylor_green", "gresho", "lid_cavity", "rayleigh_taylor")

RT_HEAVY = 1.8
RT_LIGHT = 1.0
TG_CFL = 0.025


class NoReferenceError(LookupError):
    """Raised for cases that have no closed-form reference solution."""


@dataclass(frozen=True)
class CaseSpec:
    case: str
    domain: DomainBox
    n: int
    re: float
    t_end: float
    boundary: BoundarySpec
    seeding: str = "cartesian"
    fr: Optional[float] = None
    seed: int = 0
    cfl: float = 0.1

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}; expected one of {CASES}")
        if self.n < 4:
            raise ValueError("need at least 4 seeds per side")
        if not self.re > 0:
            raise ValueError("Reynolds number must be positive (or inf)")
        if not self.cfl > 0:
            raise ValueError("CFL number must be positive")
        if self.seeding not in ("cartesian", "vogel"):
            raise ValueError(f"unknown seeding {self.seeding!r}")

    @property
    def nu(self) -> float:
        return 0.0 if math.isinf(self.re) else 1.0 / self.re

    @property
    def shape(self) -> tuple[int, int]:
        """Seeds along x and y for Cartesian seeding (``n`` on the short side)."""
        w, h = self.domain.width, self.domain.height
        if w <= h:
            return self.n, int(round(self.n * h / w))
        return int(round(self.n * w / h)), self.n

    @property
    def delta_r(self) -> float:
        nx, ny = self.shape
        return math.sqrt(self.domain.area / (nx * ny))


def make_case(
    case: str,
    n: int,
    re: Optional[float] = None,
    t_end: Optional[float] = None,
    seeding: str = "cartesian",
    fr: Optional[float] = None,
    seed: int = 0,
    cfl: Optional[float] = None,
) -> CaseSpec:
    """Case with the benchmark's domain, walls and default parameters.

    Taylor-Green defaults to a smaller CFL number so that its convergence
    study measures spatial rather than first-order temporal error.
    """
    unit = DomainBox(-0.5, 0.5, -0.5, 0.5)
    if case == "taylor_green":
        return CaseSpec(case, unit, n, 400.0 if re is None else re, 0.2 if t_end is None else t_end,
                        BoundarySpec.uniform(Wall.free_slip()), seeding, seed=seed,
                        cfl=TG_CFL if cfl is None else cfl)
    cfl = 0.1 if cfl is None else cfl
    if case == "gresho":
        return CaseSpec(case, unit, n, math.inf if re is None else re, 3.0 if t_end is None else t_end,
                        BoundarySpec.uniform(Wall.free_slip()), seeding, seed=seed, cfl=cfl)
    if case == "lid_cavity":
        walls = (Wall.no_slip(), Wall.no_slip(), Wall.no_slip(), Wall.dirichlet(1.0, 0.0))
        return CaseSpec(case, unit, n, 100.0 if re is None else re, 10.0 if t_end is None else t_end,
                        BoundarySpec(walls), seeding, seed=seed, cfl=cfl)
    if case == "rayleigh_taylor":
        fr = 1.0 if fr is None else fr
        bnd = BoundarySpec.uniform(Wall.no_slip(), gravity=(0.0, -1.0 / fr**2))
        return CaseSpec(case, DomainBox(0.0, 1.0, 0.0, 2.0), n, 420.0 if re is None else re,
                        5.0 if t_end is None else t_end, bnd, seeding, fr=fr, seed=seed, cfl=cfl)
    raise ValueError(f"unknown case {case!r}; expected one of {CASES}")


def step_config(spec: CaseSpec, **overrides) -> StepConfig:
    base = dict(domain=spec.domain, delta_r=spec.delta_r, nu=spec.nu, boundary=spec.boundary, v_ref=1.0,
                cfl=spec.cfl)
    base.update(overrides)
    return StepConfig(**base)


# ---------------------------------------------------------------------------
# seeding


def seed_positions(spec: CaseSpec) -> np.ndarray:
    """Cartesian lattice with half-cell offset, or a golden-angle (Vogel) spiral."""
    d = spec.domain
    nx, ny = spec.shape
    if spec.seeding == "cartesian":
        xs = d.xmin + (np.arange(nx) + 0.5) * d.width / nx
        ys = d.ymin + (np.arange(ny) + 0.5) * d.height / ny
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])
    # spiral covering the box, clipped to its interior
    target = nx * ny
    cx, cy = 0.5 * (d.xmin + d.xmax), 0.5 * (d.ymin + d.ymax)
    radius = 0.5 * math.hypot(d.width, d.height)
    total = int(math.ceil(target * math.pi * radius**2 / d.area))
    k = np.arange(total)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    r = radius * np.sqrt((k + 0.5) / total)
    th = k * golden
    pts = np.column_stack([cx + r * np.cos(th), cy + r * np.sin(th)])
    margin = 1e-3 * spec.delta_r
    inside = (
        (pts[:, 0] > d.xmin + margin) & (pts[:, 0] < d.xmax - margin)
        & (pts[:, 1] > d.ymin + margin) & (pts[:, 1] < d.ymax - margin)
    )
    return pts[inside]


# ---------------------------------------------------------------------------
# closed forms


def _tg_decay(spec: CaseSpec, t: float) -> float:
    return math.exp(-2.0 * t * math.pi**2 / spec.re) if not math.isinf(spec.re) else 1.0


def gresho_velocity(r):
    """Azimuthal speed of the Gresho vortex: ``5r``, ``2 - 5r``, then 0."""
    r = np.asarray(r, dtype=float)
    return np.where(r < 0.2, 5.0 * r, np.where(r < 0.4, 2.0 - 5.0 * r, 0.0))


def gresho_pressure(r):
    r = np.asarray(r, dtype=float)
    inner = 5.0 + 12.5 * r**2
    with np.errstate(divide="ignore"):
        ring = 9.0 - 4.0 * math.log(0.2) + 12.5 * r**2 - 20.0 * r + 4.0 * np.log(np.maximum(r, 1e-300))
    outer = 3.0 + 4.0 * math.log(2.0)
    return np.where(r < 0.2, inner, np.where(r < 0.4, ring, outer))


def exact_solution(spec: CaseSpec, t: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Reference ``(v, p)`` at points ``x``.

    Raises
    ------
    NoReferenceError
        For the lid-driven cavity and Rayleigh-Taylor cases.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    if spec.case == "taylor_green":
        a = _tg_decay(spec, t)
        px, py = math.pi * x[:, 0], math.pi * x[:, 1]
        v = np.column_stack([np.cos(px) * np.sin(py), -np.sin(px) * np.cos(py)]) * a
        p = 0.5 * (np.sin(px) ** 2 + np.sin(py) ** 2 - 1.0) * a * a
        return v, p
    if spec.case == "gresho":
        cx = 0.5 * (spec.domain.xmin + spec.domain.xmax)
        cy = 0.5 * (spec.domain.ymin + spec.domain.ymax)
        dx, dy = x[:, 0] - cx, x[:, 1] - cy
        r = np.hypot(dx, dy)
        vphi = gresho_velocity(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(r > 0, vphi / r, 0.0)
        return np.column_stack([-dy * s, dx * s]), gresho_pressure(r)
    raise NoReferenceError(f"case {spec.case!r} has no analytic reference")


def exact_energy(spec: CaseSpec, t: float) -> float:
    """Kinetic energy of the reference flow (Taylor-Green only)."""
    if spec.case != "taylor_green":
        raise NoReferenceError(f"case {spec.case!r} has no closed-form energy")
    d = spec.domain
    if (d.width, d.height) != (1.0, 1.0):
        raise NoReferenceError("closed-form energy assumes a unit box")
    # 1/2 * integral of |v|^2 over the unit box is 1/4 at t = 0
    return 0.25 * _tg_decay(spec, t) ** 2


def _rt_interface(x):
    return 1.0 - 0.15 * np.cos(2.0 * math.pi * x)


def init_case(spec: CaseSpec, config: Optional[StepConfig] = None) -> ParticleState:
    """Seeds plus initial fields sampled from the case's closed forms."""
    config = config or step_config(spec)
    x = seed_positions(spec)
    n = x.shape[0]
    if spec.case in ("taylor_green", "gresho"):
        v, p = exact_solution(spec, 0.0, x)
        rho = np.ones(n)
    elif spec.case == "lid_cavity":
        v, p, rho = np.zeros((n, 2)), np.zeros(n), np.ones(n)
    else:
        phi = _rt_interface(x[:, 0])
        heavy = x[:, 1] > phi
        rho = np.where(heavy, RT_HEAVY, RT_LIGHT)
        g = -spec.boundary.gravity[1]
        top = spec.domain.ymax
        # hydrostatic start for the fixed-point iteration
        p = np.where(
            heavy,
            RT_HEAVY * g * (top - x[:, 1]),
            RT_HEAVY * g * (top - phi) + RT_LIGHT * g * (phi - x[:, 1]),
        )
        v = np.zeros((n, 2))
    state = initial_state(x, v, p, rho, config)
    state.p -= np.average(state.p, weights=state.ref_volume)
    return state


# ---------------------------------------------------------------------------
# errors and studies


@dataclass
class ErrorEntry:
    n: int
    t: float
    velocity_l2: float
    pressure_l2: float
    energy_error: float
    divergence_l2: float


@dataclass
class ErrorReport:
    case: str
    entries: list[ErrorEntry] = field(default_factory=list)
    orders: dict[str, float] = field(default_factory=dict)

    HEADER = ("N", "t", "velocity_l2", "pressure_l2", "energy_error", "divergence_l2")

    @staticmethod
    def columns(entries: Sequence[ErrorEntry]) -> list[list]:
        return [
            [e.n for e in entries], [e.t for e in entries],
            [e.velocity_l2 for e in entries], [e.pressure_l2 for e in entries],
            [e.energy_error for e in entries], [e.divergence_l2 for e in entries],
        ]

    def table(self) -> str:
        rows = [
            f"{e.n},{e.t:.17g},{e.velocity_l2:.17g},{e.pressure_l2:.17g},"
            f"{e.energy_error:.17g},{e.divergence_l2:.17g}"
            for e in self.entries
        ]
        return "\n".join([",".join(self.HEADER), *rows]) + "\n"


def _l2(volume, diff) -> float:
    diff = np.asarray(diff, dtype=float)
    sq = diff * diff if diff.ndim == 1 else np.einsum("ij,ij->i", diff, diff)
    return float(math.sqrt(np.sum(volume * sq)))


def error_norms(state: ParticleState, mesh: VoronoiMesh, spec: CaseSpec, t: Optional[float] = None) -> ErrorEntry:
    """Volume-weighted L2 errors against the reference at time ``t``.

    Pressure is compared after removing the volume-weighted mean of both
    fields; the divergence norm uses the weak divergence.
    """
    t = state.t if t is None else t
    vol = mesh.volume
    v_ex, p_ex = exact_solution(spec, t, state.x)
    p_num = state.p - np.average(state.p, weights=vol)
    p_ref = p_ex - np.average(p_ex, weights=vol)
    e_num = kinetic_energy(vol, state.rho, state.v)
    try:
        e_ref = exact_energy(spec, t)
    except NoReferenceError:
        e_ref = kinetic_energy(vol, state.rho, v_ex)
    return ErrorEntry(
        n=spec.n,
        t=t,
        velocity_l2=_l2(vol, state.v - v_ex),
        pressure_l2=_l2(vol, p_num - p_ref),
        energy_error=abs(e_num - e_ref) / e_ref,
        divergence_l2=_l2(vol, ops.weak_divergence(mesh, state.v)),
    )


def fit_order(ns: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of ``-log(err)`` against ``log(N)``."""
    slope = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(errors, float)), 1)[0]
    return float(-slope)


def run_case(
    spec: CaseSpec,
    config: Optional[StepConfig] = None,
    t_end: Optional[float] = None,
    **run_kwargs,
) -> RunResult:
    config = config or step_config(spec)
    state = init_case(spec, config)
    return run(state, config, spec.t_end if t_end is None else t_end, **run_kwargs)


def convergence_study(
    spec: CaseSpec,
    ns: Sequence[int],
    config_overrides: Optional[dict] = None,
    on_result: Optional[Callable[[CaseSpec, RunResult], None]] = None,
) -> ErrorReport:
    """Run ``spec`` at each resolution in ``ns`` and fit convergence orders."""
    if len(ns) < 2:
        raise ValueError("a convergence study needs at least two resolutions")
    report = ErrorReport(spec.case)
    for n in ns:
        s = replace(spec, n=int(n))
        res = run_case(s, step_config(s, **(config_overrides or {})))
        if on_result is not None:
            on_result(s, res)
        report.entries.append(error_norms(res.state, res.mesh, s))
    ns_ = [e.n for e in report.entries]
    for name in ("velocity_l2", "pressure_l2", "energy_error", "divergence_l2"):
        vals = [getattr(e, name) for e in report.entries]
        if all(v > 0 for v in vals) and len(set(ns_)) > 1:
            report.orders[name] = fit_order(ns_, vals)
    return report


# ---------------------------------------------------------------------------
# case-specific diagnostics


def ghia_re100() -> dict[str, np.ndarray]:
    """Ghia et al. (1982) Re=100 centreline data on the unit cavity."""
    text = resources.files("silva").joinpath("data/ghia1982_re100.csv").read_text()
    rows = [r for r in csv.reader(line for line in text.splitlines() if not line.startswith("#"))]
    data = np.array(rows[1:], dtype=float)
    return {"y": data[:, 0], "u": data[:, 1], "x": data[:, 2], "v": data[:, 3]}


def sample_velocity(state: ParticleState, boundary: BoundarySpec, domain: DomainBox, points) -> np.ndarray:
    """Piecewise-linear velocity at arbitrary points.

    Interpolates over the seeds plus nodes on every no-slip or Dirichlet
    wall carrying the wall velocity; points outside the hull take the
    nearest value.
    """
    pts = [state.x]
    vals = [state.v]
    spacing = math.sqrt(domain.area / max(state.n, 1))
    d = domain
    corners = np.array([[d.xmin, d.ymin], [d.xmax, d.ymin], [d.xmin, d.ymax], [d.xmax, d.ymax]])
    for w, wall in enumerate(boundary.walls):
        if not wall.has_mirror:
            continue
        if w < 2:
            s = np.linspace(d.ymin, d.ymax, max(2, int(round(d.height / spacing)) + 1))[1:-1]
            xw = d.xmin if w == 0 else d.xmax
            nodes = np.column_stack([np.full_like(s, xw), s])
        else:
            s = np.linspace(d.xmin, d.xmax, max(2, int(round(d.width / spacing)) + 1))[1:-1]
            yw = d.ymin if w == 2 else d.ymax
            nodes = np.column_stack([s, np.full_like(s, yw)])
        pts.append(nodes)
        vals.append(np.tile(wall.mirror_velocity, (nodes.shape[0], 1)))
    if len(pts) > 1:
        pts.append(corners)
        vals.append(np.zeros((4, 2)))
    allp = np.concatenate(pts)
    allv = np.concatenate(vals)
    q = np.asarray(points, dtype=float).reshape(-1, 2)
    out = LinearNDInterpolator(allp, allv)(q)
    miss = ~np.isfinite(out).all(axis=1)
    if np.any(miss):
        out[miss] = NearestNDInterpolator(allp, allv)(q[miss])
    return out


def cavity_centerlines(state: ParticleState, spec: CaseSpec) -> dict[str, np.ndarray]:
    """Simulated u on the vertical and v on the horizontal centreline at Ghia's ordinates."""
    ref = ghia_re100()
    d = spec.domain
    cx = 0.5 * (d.xmin + d.xmax)
    cy = 0.5 * (d.ymin + d.ymax)
    ys = d.ymin + ref["y"] * d.height
    xs = d.xmin + ref["x"] * d.width
    u = sample_velocity(state, spec.boundary, d, np.column_stack([np.full_like(ys, cx), ys]))[:, 0]
    v = sample_velocity(state, spec.boundary, d, np.column_stack([xs, np.full_like(xs, cy)]))[:, 1]
    return {"y": ref["y"], "u": u, "u_ref": ref["u"], "x": ref["x"], "v": v, "v_ref": ref["v"]}


def gresho_profile(state: ParticleState, spec: CaseSpec, bins: Optional[int] = None):
    """Azimuthally averaged tangential speed: (bin centres, mean v_phi)."""
    return tangential_profile(state, spec.domain, bins or max(10, spec.n // 2))


def tangential_profile(state: ParticleState, domain: DomainBox, bins: int):
    cx = 0.5 * (domain.xmin + domain.xmax)
    cy = 0.5 * (domain.ymin + domain.ymax)
    dx, dy = state.x[:, 0] - cx, state.x[:, 1] - cy
    r = np.hypot(dx, dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        vphi = np.where(r > 0, (dx * state.v[:, 1] - dy * state.v[:, 0]) / r, 0.0)
    rmax = 0.5 * min(domain.width, domain.height)
    edges = np.linspace(0.0, rmax, bins + 1)
    idx = np.digitize(r, edges) - 1
    ok = (idx >= 0) & (idx < bins)
    cnt = np.bincount(idx[ok], minlength=bins)
    tot = np.bincount(idx[ok], weights=vphi[ok], minlength=bins)
    with np.errstate(invalid="ignore"):
        mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    return 0.5 * (edges[:-1] + edges[1:]), mean


def min_neighbor_distance(mesh: VoronoiMesh, center=None, radius: float = math.inf) -> float:
    """Smallest inter-seed distance over facet pairs whose midpoint is within ``radius`` of ``center``."""
    if center is None:
        d = mesh.domain
        center = (0.5 * (d.xmin + d.xmax), 0.5 * (d.ymin + d.ymax))
    mid = 0.5 * (mesh.positions[mesh.pair_i] + mesh.positions[mesh.pair_j])
    sel = np.hypot(mid[:, 0] - center[0], mid[:, 1] - center[1]) < radius
    return float(mesh.pair_r[sel].min()) if np.any(sel) else math.inf


def heavy_center_of_mass(state: ParticleState) -> float:
    """Mass-weighted mean height of the heavy phase."""
    heavy = state.rho > 0.5 * (RT_HEAVY + RT_LIGHT)
    return float(np.average(state.x[heavy, 1], weights=state.mass[heavy]))
