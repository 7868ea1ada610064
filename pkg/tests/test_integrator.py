import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_seeds
from silva import operators as ops
from silva.benchmarks import make_case, run_case, step_config
from silva.integrator import (
    BoundarySpec,
    ParticleState,
    StepConfig,
    Wall,
    compute_dt,
    initial_state,
    kinetic_energy,
    silva_step,
    viscous_and_body_forces,
)
from silva.voronoi import DomainBox, build_mesh

UNIT = DomainBox(0.0, 1.0, 0.0, 1.0)


def lattice(n):
    xs = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, xs)
    return np.column_stack([gx.ravel(), gy.ravel()])


def bare_state(v):
    n = len(v)
    z = np.zeros(n)
    return ParticleState(np.zeros((n, 2)), np.asarray(v, float), z, z + 1, z + 1, z + 1)


def test_dt_at_rest_is_advective_bound():
    cfg = StepConfig(UNIT, delta_r=0.01, cfl=0.1, v_ref=1.0)
    assert compute_dt(bare_state(np.zeros((5, 2))), cfg) == pytest.approx(1e-3, rel=1e-15)


def test_dt_uses_max_speed_above_reference():
    cfg = StepConfig(UNIT, delta_r=0.01, cfl=0.1)
    assert compute_dt(bare_state([[0.0, 4.0], [3.0, 0.0]]), cfg) == pytest.approx(2.5e-4)


def test_dt_viscous_cap():
    state = bare_state(np.zeros((3, 2)))
    # cap 0.25 * 1e-4 / 1e-2 = 2.5e-3 is looser than the advective 1e-3
    assert compute_dt(state, StepConfig(UNIT, delta_r=0.01, nu=0.01)) == pytest.approx(1e-3)
    assert compute_dt(state, StepConfig(UNIT, delta_r=0.01, nu=0.1)) == pytest.approx(2.5e-4)
    assert compute_dt(state, StepConfig(UNIT, delta_r=0.01, dt_max=1e-5)) == 1e-5
    with pytest.raises(ValueError):
        compute_dt(state, StepConfig(UNIT, delta_r=0.0))


def test_lid_mirror_drives_top_row():
    n = 4
    m = build_mesh(lattice(n), UNIT, 1 / n)
    walls = (Wall.no_slip(), Wall.no_slip(), Wall.no_slip(), Wall.dirichlet(1.0, 0.0))
    dt, nu = 1e-3, 0.01
    vs = viscous_and_body_forces(m, np.zeros((m.n, 2)), BoundarySpec(walls), nu, dt)
    top = m.positions[:, 1] > 1 - 1 / n
    # |G| = 1/4, r = 2 * 1/8, |w| = 1/16: dt nu (|G|/r) 2 / |w|
    np.testing.assert_allclose(vs[top, 0], dt * nu * 1.0 * 2 * 16, rtol=1e-12)
    np.testing.assert_array_equal(vs[~top], 0.0)
    np.testing.assert_array_equal(vs[:, 1], 0.0)


def test_no_slip_mirror_is_reflected_velocity():
    n = 4
    m = build_mesh(lattice(n), UNIT, 1 / n)
    v = np.tile([0.3, -0.2], (m.n, 1))
    vs = viscous_and_body_forces(m, v, BoundarySpec.uniform(Wall.no_slip()), 1.0, 1.0)
    # interior Laplacian of a constant is zero, each wall facet adds -(|G|/r) 2 v / |w|
    walls = np.bincount(m.wall_cell, minlength=m.n)
    np.testing.assert_allclose(vs - v, -(walls * 2 * 16)[:, None] * v, rtol=1e-12, atol=1e-15)
    same = viscous_and_body_forces(m, v, BoundarySpec.uniform(Wall.dirichlet(0.0, 0.0)), 1.0, 1.0)
    np.testing.assert_array_equal(same, vs)


def test_free_slip_adds_no_friction(rng):
    m = build_mesh(random_seeds(rng, 100), UNIT, 0.1)
    v = np.tile([1.0, 0.0], (100, 1))
    np.testing.assert_allclose(viscous_and_body_forces(m, v, BoundarySpec(), 0.5, 0.01), v, atol=1e-15)


def test_forces_identity_and_gravity(rng):
    m = build_mesh(random_seeds(rng, 60), UNIT, 0.13)
    v = rng.standard_normal((60, 2))
    np.testing.assert_array_equal(viscous_and_body_forces(m, v, BoundarySpec(), 0.0, 0.1), v)
    g = BoundarySpec(gravity=(0.0, -2.0))
    np.testing.assert_allclose(viscous_and_body_forces(m, v, g, 0.0, 0.1), v + [0.0, -0.2])


def test_boundary_validation():
    with pytest.raises(ValueError):
        Wall("sticky")
    with pytest.raises(ValueError):
        Wall("no_slip", (1.0, 0.0))
    with pytest.raises(ValueError):
        BoundarySpec((Wall(),) * 3)


def small_config(n, **kw):
    return StepConfig(UNIT, delta_r=1 / n, **kw)


def test_fluid_at_rest_stays_at_rest():
    n = 8
    cfg = small_config(n, nu=0.01, boundary=BoundarySpec.uniform(Wall.no_slip()))
    s0 = initial_state(lattice(n), np.zeros((n * n, 2)), 0.0, 1.0, cfg)
    s1, d = silva_step(s0, cfg)
    np.testing.assert_array_equal(s1.x, s0.x)
    np.testing.assert_array_equal(s1.v, 0.0)
    np.testing.assert_array_equal(s1.p, 0.0)
    assert d.energy == 0.0 and d.step == 1


def test_step_leaves_input_untouched(rng):
    cfg = small_config(10, nu=0.01)
    s0 = initial_state(random_seeds(rng, 100), rng.standard_normal((100, 2)), 0.0, 1.0, cfg)
    before = s0.copy()
    s1, _ = silva_step(s0, cfg)
    for name in ("x", "v", "p", "rho", "mass", "ref_volume"):
        np.testing.assert_array_equal(getattr(s0, name), getattr(before, name))
    assert s0.t == 0.0 and s0.step == 0
    assert s1.step == 1 and s1.t > 0
    np.testing.assert_array_equal(s1.mass, s0.mass)
    np.testing.assert_array_equal(s1.rho, s0.rho)


def test_step_follows_the_five_stages(rng):
    cfg = small_config(10, nu=0.02, boundary=BoundarySpec.uniform(Wall.no_slip(), gravity=(0.0, -1.0)))
    x = random_seeds(rng, 100, min_sep=0.03)
    v = 0.2 * rng.standard_normal((100, 2))
    s0 = initial_state(x, v, 0.0, 1.0, cfg)
    dt = 1e-3
    s1, _ = silva_step(s0, cfg, dt)
    np.testing.assert_allclose(s1.x, x + dt * v)
    mesh = build_mesh(s1.x, UNIT, 0.1)
    vs = viscous_and_body_forces(mesh, v, cfg.boundary, cfg.nu, dt)
    np.testing.assert_allclose(s1.v, vs - dt * ops.stabilized_gradient(mesh, s1.p), atol=1e-12)


def test_escaped_seed_is_reflected(rng):
    n = 6
    cfg = small_config(n)
    x = lattice(n)
    v = np.zeros_like(x)
    v[0] = [-1.0, 0.0]  # seed at x = 1/12 heads out through xmin
    s0 = initial_state(x, v, 0.0, 1.0, cfg)
    s1, d = silva_step(s0, cfg, 0.1)
    assert d.escaped == 1
    assert s1.x[0, 0] == pytest.approx(0.1 - 1 / 12)
    assert np.all((s1.x > 0) & (s1.x < 1))


def gresho_small(n=16, **kw):
    spec = make_case("gresho", n, t_end=0.05, **kw)
    return spec, step_config(spec)


def test_projection_never_worsens_divergence():
    spec, cfg = gresho_small()
    res = run_case(spec, cfg)
    assert all(d.div_l2 <= d.div_l2_star for d in res.diagnostics)


def test_run_lands_on_end_time_and_snapshots():
    spec, cfg = gresho_small()
    seen = []
    res = run_case(spec, cfg, snapshot_steps=5, on_snapshot=lambda s: seen.append(s.step))
    assert res.state.t == 0.05
    assert res.diagnostics[-1].t == 0.05
    steps = len(res.diagnostics)
    assert seen == res.snapshot_steps
    assert seen[0] == 0 and seen[-1] == steps
    assert all(k % 5 == 0 for k in seen[1:-1])
    assert sum(d.dt for d in res.diagnostics) == pytest.approx(0.05, rel=1e-12)


def test_zero_end_time_gives_initial_snapshot_only():
    spec, cfg = gresho_small()
    res = run_case(spec, cfg, t_end=0.0)
    assert res.diagnostics == [] and res.snapshot_steps == [0]


def test_snapshot_interval():
    spec, cfg = gresho_small()
    res = run_case(spec, cfg, snapshot_interval=0.02)
    times = {0: 0.0}
    for d in res.diagnostics:
        times[d.step] = d.t
    t = [times[k] for k in res.snapshot_steps]
    assert t[0] == 0.0 and t[-1] == 0.05
    assert len(t) == 4  # 0, ~0.02, ~0.04, 0.05


def test_taylor_green_step_count_matches_dt_rule():
    spec = make_case("taylor_green", 32)
    res = run_case(spec)
    predicted = math.ceil(spec.t_end / (spec.cfl * spec.delta_r / 1.0))
    assert predicted / 2 <= len(res.diagnostics) <= 2 * predicted


def test_viscous_energy_decays_every_step():
    res = run_case(make_case("taylor_green", 16, t_end=0.1))
    e = [d.energy for d in res.diagnostics]
    assert np.all(np.diff(e) < 0)


def test_inviscid_energy_non_increasing():
    res = run_case(make_case("taylor_green", 16, re=math.inf, t_end=0.1))
    e = np.array([0.25] + [d.energy for d in res.diagnostics])
    assert np.all(np.diff(e[1:]) <= 0)
    assert abs(e[-1] - 0.25) / 0.25 < 5e-3


def test_volume_drift_bounded_under_refinement():
    # drift scales like dt / dr^1.4, so refine with dt proportional to dr^2
    drifts = []
    for n, dt in ((16, 2e-3), (32, 5e-4)):
        spec = make_case("taylor_green", n, t_end=0.1)
        res = run_case(spec, step_config(spec, dt_max=dt, cfl=10.0))
        drifts.append(max(max(-d.volume_drift_min, d.volume_drift_max) for d in res.diagnostics))
    assert drifts[0] < 1e-2 and drifts[1] <= drifts[0]


def test_energy_helper():
    assert kinetic_energy(np.array([0.5, 0.5]), np.array([1.0, 2.0]), np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.75


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_projection_adds_no_energy_to_uniform_flow(u, w, seed):
    # free-slip walls block the normal component; the projection can only remove energy
    cfg = small_config(8)
    x = random_seeds(np.random.default_rng(seed), 64, min_sep=0.04)
    s0 = initial_state(x, np.tile([u, w], (64, 1)), 0.0, 1.0, cfg)
    s1, d = silva_step(s0, cfg, 1e-3)
    e0 = kinetic_energy(s1.mesh.volume, s1.rho, s0.v)
    assert d.energy <= e0 * (1 + 1e-9) + 1e-15
