"""Command-line entry point: flat key = value configs, runs and output files.

Example config::

    # Taylor-Green at 32 x 32
    case = taylor_green
    N = 32
    Re = 400
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import operators as ops
from .benchmarks import (
    CASES,
    CaseSpec,
    ErrorReport,
    NoReferenceError,
    cavity_centerlines,
    error_norms,
    init_case,
    make_case,
    step_config,
)
from .integrator import ParticleState, StepConfig, StepDiagnostics, kinetic_energy, run, silva_step
from .io import write_diagnostics, write_mesh_dump, write_snapshot, write_table, write_vtk
from .pressure import SolverError, assemble_B, assemble_rhs
from .voronoi import MeshError

__all__ = ["ConfigError", "SimConfig", "parse_config", "load_config", "run_simulation", "check_invariants", "main"]

log = logging.getLogger("silva")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# desk-scale resolution per case when neither N nor delta_r is given
DEFAULT_N = {"taylor_green": 32, "gresho": 50, "lid_cavity": 50, "rayleigh_taylor": 60}


class ConfigError(ValueError):
    """Invalid configuration text or values."""


@dataclass
class SimConfig:
    case: str
    n: Optional[int] = None
    delta_r: Optional[float] = None
    re: Optional[float] = None
    fr: Optional[float] = None
    t_end: Optional[float] = None
    seeding: str = "cartesian"
    seed: int = 0
    cfl: Optional[float] = None
    safety: float = 0.25
    dt_max: float = math.inf
    tol: float = 1e-9
    max_iter: Optional[int] = None
    outer_tol: float = 1e-12
    max_outer: int = 100
    inner_solver: str = "direct"
    inner_tol: float = 1e-10
    stabilize: bool = True
    output_dir: str = "output"
    snapshot_steps: Optional[int] = None
    snapshot_interval: Optional[float] = None
    threads: Optional[int] = None
    check_steps: int = 10
    write_particles: bool = True
    write_mesh: bool = False
    write_vtk: bool = False
    write_diagnostics: bool = True

    def validate(self) -> "SimConfig":
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; expected one of {', '.join(CASES)}")
        positive = {
            "tol": self.tol, "outer_tol": self.outer_tol, "inner_tol": self.inner_tol,
            "safety": self.safety, "dt_max": self.dt_max,
        }
        for key in ("cfl", "delta_r", "re", "fr", "t_end", "snapshot_interval"):
            val = getattr(self, key)
            if val is not None:
                positive[key] = val
        for key, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive, got {val}")
        for key in ("n", "snapshot_steps", "threads", "max_iter", "max_outer", "check_steps"):
            val = getattr(self, key)
            if val is not None and val < 1:
                raise ConfigError(f"{key} must be at least 1, got {val}")
        if self.n is not None and self.n < 4:
            raise ConfigError("N must be at least 4")
        if self.seeding not in ("cartesian", "vogel"):
            raise ConfigError(f"seeding must be cartesian or vogel, got {self.seeding!r}")
        if self.inner_solver not in ("minres", "direct"):
            raise ConfigError(f"inner_solver must be minres or direct, got {self.inner_solver!r}")
        self._resolve_resolution()
        return self

    def _resolve_resolution(self):
        short = _short_side(self.case)
        if self.delta_r is None:
            if self.n is None:
                self.n = DEFAULT_N[self.case]
            return
        n = short / self.delta_r
        if self.n is not None:
            if not math.isclose(self.n, n, rel_tol=1e-9):
                raise ConfigError(
                    f"N = {self.n} and delta_r = {self.delta_r} disagree "
                    f"(N implies delta_r = {short / self.n:.17g})"
                )
            return
        if not math.isclose(n, round(n), rel_tol=1e-9):
            raise ConfigError(f"delta_r = {self.delta_r} does not divide the domain's short side {short}")
        self.n = int(round(n))

    def case_spec(self) -> CaseSpec:
        return make_case(
            self.case, self.n, re=self.re, t_end=self.t_end, seeding=self.seeding,
            fr=self.fr, seed=self.seed, cfl=self.cfl,
        )

    def step_config(self, spec: Optional[CaseSpec] = None) -> StepConfig:
        spec = spec or self.case_spec()
        return step_config(
            spec, safety=self.safety, dt_max=self.dt_max, tol=self.tol, max_iter=self.max_iter,
            stabilize=self.stabilize, outer_tol=self.outer_tol, max_outer=self.max_outer,
            inner_solver=self.inner_solver, inner_tol=self.inner_tol,
        )


def _short_side(case: str) -> float:
    d = make_case(case, 4).domain
    return min(d.width, d.height)


_ALIASES = {
    "n": "n", "delta_r": "delta_r", "dr": "delta_r", "re": "re", "fr": "fr",
    "t_end": "t_end", "t_f": "t_end", "tf": "t_end", "tend": "t_end",
    "output": "output_dir", "outdir": "output_dir",
}
_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_INT = {"n", "seed", "max_iter", "max_outer", "snapshot_steps", "threads", "check_steps"}
_BOOL = {"stabilize", "write_particles", "write_mesh", "write_vtk", "write_diagnostics"}
_FLOAT = {"delta_r", "re", "fr", "t_end", "cfl", "safety", "dt_max", "tol", "outer_tol", "inner_tol",
          "snapshot_interval"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, where: str):
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            val = float(raw)
            if math.isnan(val):
                raise ValueError
            return val
    except ValueError:
        kind = "an integer" if key in _INT else "a number"
        raise ConfigError(f"{where}: {key} must be {kind}, got {raw!r}") from None
    if key in _BOOL:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{where}: {key} must be true or false, got {raw!r}")
    return raw


def parse_config(text: str, strict: bool = True, source: str = "<config>") -> SimConfig:
    """Parse ``key = value`` lines (``#`` starts a comment).

    Keys are case-insensitive.  Unknown keys raise in strict mode and only
    warn otherwise.
    """
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        key = _ALIASES.get(key, key)
        if not raw:
            raise ConfigError(f"{where}: empty value for {key}")
        if key not in _FIELDS:
            msg = f"{where}: unknown key {key!r}"
            if strict:
                raise ConfigError(msg)
            warnings.warn(msg, stacklevel=2)
            continue
        if key in values:
            raise ConfigError(f"{where}: {key} given twice")
        values[key] = _convert(key, raw, where)
    if "case" not in values:
        raise ConfigError(f"{source}: missing required key 'case'")
    return SimConfig(**values).validate()


def load_config(path, strict: bool = True) -> SimConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, strict=strict, source=str(path))


# ---------------------------------------------------------------------------
# running


def set_threads(k: Optional[int]) -> int:
    import numba

    if k is None:
        return numba.get_num_threads()
    limit = numba.config.NUMBA_NUM_THREADS
    if k > limit:
        log.warning("requested %d threads, only %d available", k, limit)
        k = limit
    numba.set_num_threads(k)
    return k


def _stem(cfg: SimConfig) -> str:
    return f"{cfg.case}_{cfg.n}"


def run_simulation(
    cfg: SimConfig,
    quiet: bool = False,
    on_step: Optional[Callable[[ParticleState, StepDiagnostics], None]] = None,
) -> dict:
    """Run the configured case and write every enabled output; returns a summary.

    ``on_step`` is called after every step with the new state and its
    diagnostics, for callers that track quantities not written to disk.
    """
    spec = cfg.case_spec()
    config = cfg.step_config(spec)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem(cfg)
    energy_rows: list[tuple[int, float, float]] = []

    def on_snapshot(st: ParticleState):
        tag = f"{stem}_{st.step:06d}"
        if cfg.write_particles:
            write_snapshot(st, out / f"{tag}.csv")
        if cfg.write_mesh and st.mesh is not None:
            write_mesh_dump(st.mesh, out / f"{tag}.mesh")
        if cfg.write_vtk and st.mesh is not None:
            write_vtk(st, st.mesh, out / f"{tag}.vtk", title=f"{cfg.case} step {st.step} t={st.t:.17g}")

    def step_hook(st: ParticleState, d: StepDiagnostics):
        energy_rows.append((d.step, d.t, d.energy))
        if on_step is not None:
            on_step(st, d)
        if not quiet and (d.step % 100 == 0):
            log.info("step %d t=%.6g dt=%.3g E=%.10g div=%.3g", d.step, d.t, d.dt, d.energy, d.div_l2)

    state = init_case(spec, config)
    e0 = kinetic_energy(state.mesh.volume, state.rho, state.v)
    energy_rows.append((0, state.t, e0))
    t0 = time.perf_counter()
    res = run(
        state, config, spec.t_end,
        snapshot_steps=cfg.snapshot_steps, snapshot_interval=cfg.snapshot_interval,
        on_snapshot=on_snapshot, on_step=step_hook,
    )
    wall = time.perf_counter() - t0

    if cfg.write_diagnostics:
        write_diagnostics(res.diagnostics, out / f"{stem}_diagnostics.csv")
    steps, ts, es = zip(*energy_rows)
    ratio = [e / e0 if e0 > 0 else math.nan for e in es]
    write_table(out / f"{cfg.case}_energy.csv", ("step", "t", "E", "E_ratio"), (steps, ts, es, ratio))
    try:
        entry = error_norms(res.state, res.mesh, spec)
    except NoReferenceError:
        pass
    else:
        write_table(out / f"{stem}_errors.csv", ErrorReport.HEADER, ErrorReport.columns([entry]))
    if cfg.case == "lid_cavity":
        c = cavity_centerlines(res.state, spec)
        labels = ["u"] * len(c["y"]) + ["v"] * len(c["x"])
        write_table(
            out / f"{cfg.case}_centerline.csv",
            ("profile", "coord", "value", "ref"),
            (labels, np.concatenate([c["y"], c["x"]]), np.concatenate([c["u"], c["v"]]),
             np.concatenate([c["u_ref"], c["v_ref"]])),
        )
    div = res.diagnostics[-1].div_l2 if res.diagnostics else ops_div_l2(res.state)
    return {
        "case": cfg.case, "n": cfg.n, "t": res.state.t, "steps": res.state.step,
        "energy": es[-1], "div_l2": div, "wall_time": wall, "output_dir": str(out),
    }


def ops_div_l2(state: ParticleState) -> float:
    d = ops.weak_divergence(state.mesh, state.v)
    return float(np.sqrt(np.sum(state.mesh.volume * d * d)))


# ---------------------------------------------------------------------------
# invariant harness


class InvariantError(AssertionError):
    pass


def _require(ok: bool, msg: str):
    if not ok:
        raise InvariantError(msg)


def check_invariants(state: ParticleState, config: StepConfig, rng: np.random.Generator, probes: int = 20):
    """Assert the per-step invariants of the mesh, the operators and the pressure system."""
    mesh = state.mesh
    d = config.domain
    x = state.x
    _require(bool(np.all(np.isfinite(x)) and np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.p))),
             "non-finite positions, velocities or pressures")
    _require(bool(np.all((x[:, 0] > d.xmin) & (x[:, 0] < d.xmax) & (x[:, 1] > d.ymin) & (x[:, 1] < d.ymax))),
             "seed outside the domain")
    _require(bool(np.all(mesh.volume > 0)), "non-positive cell volume")
    total = float(np.sum(mesh.volume))
    _require(abs(total - d.area) <= 1e-10 * d.area, f"cell volumes sum to {total!r}, domain area {d.area!r}")
    _require(bool(np.all(np.isclose(mesh.pair_r, np.hypot(*(x[mesh.pair_i] - x[mesh.pair_j]).T), rtol=1e-12))),
             "facet distances out of sync with seeds")
    rho = state.rho
    rho0 = float(rho[0]) if np.all(rho == rho[0]) else 1.0
    B = assemble_B(mesh, rho0)
    _require(B.is_symmetric(), "B is not exactly symmetric")
    scale = float(np.abs(B.diagonal).max())
    _require(float(np.abs(B.row_sums()).max()) <= 1e-12 * scale, "B applied to a constant is not zero")
    for _ in range(probes):
        q = rng.standard_normal(mesh.n)
        _require(B.quadratic_form(q) >= -1e-12 * scale * float(q @ q), "B has a negative quadratic form")
    b = assemble_rhs(mesh, state.v, 1.0)
    _require(abs(float(b.sum())) <= 1e-11 * max(float(np.abs(b).sum()), 1e-300), "right-hand side does not sum to zero")
    g = ops.strong_gradient(mesh, x[:, 0] + 2.0 * x[:, 1])
    interior = mesh.interior
    _require(bool(np.allclose(g[interior], [1.0, 2.0], atol=1e-9)), "strong gradient not exact on affine fields")


def run_check(cfg: SimConfig) -> int:
    spec = cfg.case_spec()
    config = cfg.step_config(spec)
    rng = np.random.default_rng(cfg.seed)
    state = init_case(spec, config)
    check_invariants(state, config, rng)
    phases = np.unique(state.rho, return_counts=True)
    for _ in range(cfg.check_steps):
        prev = state
        state, diag = silva_step(state, config)
        check_invariants(state, config, rng)
        _require(state.t > prev.t and state.step == prev.step + 1, "time or step counter did not advance")
        _require(all(np.array_equal(a, b) for a, b in zip(np.unique(state.rho, return_counts=True), phases)),
                 "per-phase particle counts changed")
        _require(math.isfinite(diag.energy), f"non-finite energy at step {state.step}")
    return state.step


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silva", description="Lagrangian Voronoi incompressible flow solver.")
    p.add_argument("--config", required=True, metavar="PATH", help="flat key = value configuration file")
    p.add_argument("--output-dir", metavar="PATH", help="overrides output_dir")
    p.add_argument("--threads", type=int, metavar="K", help="worker threads (fallback: $SILVA_THREADS)")
    p.add_argument("--case", choices=CASES)
    p.add_argument("--N", type=int, dest="n", metavar="N", help="seeds along the short side")
    p.add_argument("--re", type=float, metavar="RE")
    p.add_argument("--tend", type=float, metavar="T")
    p.add_argument("--lenient", action="store_true", help="warn about unknown config keys instead of failing")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--check", action="store_true", help="run the invariant suite for a few steps and exit")
    return p


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    over = {}
    if args.case is not None:
        over["case"] = args.case
    if args.n is not None:
        # an explicit N replaces any delta_r from the file
        over["n"], over["delta_r"] = args.n, None
    if args.re is not None:
        over["re"] = args.re
    if args.tend is not None:
        over["t_end"] = args.tend
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    if args.threads is not None:
        over["threads"] = args.threads
    if not over:
        return cfg
    return dataclasses.replace(cfg, **over).validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, strict=not args.lenient)
        cfg = _apply_overrides(cfg, args)
        threads = cfg.threads
        if threads is None and os.environ.get("SILVA_THREADS"):
            try:
                threads = int(os.environ["SILVA_THREADS"])
            except ValueError:
                raise ConfigError(f"SILVA_THREADS must be an integer, got {os.environ['SILVA_THREADS']!r}") from None
            if threads < 1:
                raise ConfigError("SILVA_THREADS must be at least 1")
    except (ConfigError, ValueError) as exc:
        print(f"silva: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        set_threads(threads)
        if args.check:
            steps = run_check(cfg)
            print(f"check {cfg.case} N={cfg.n}: {steps} steps, all invariants hold")
            return EXIT_OK
        summary = run_simulation(cfg, quiet=args.quiet)
    except InvariantError as exc:
        print(f"silva: invariant violated: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SolverError, MeshError, OSError, ValueError) as exc:
        print(f"silva: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(
        f"{summary['case']} N={summary['n']} t={summary['t']:.6g} steps={summary['steps']} "
        f"E={summary['energy']:.10g} div_l2={summary['div_l2']:.4g} wall={summary['wall_time']:.1f}s"
    )
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
