"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line straight to the
terminal (bypassing capture) and then asserts the same condition.
"""

import pathlib
import time

import numpy as np
import pytest
from conftest import reference_heat

from turnpike_lab.config import load_config
from turnpike_lab.dissipativity import (
    StorageFunction,
    SupplyRate,
    check_dissipation,
    estimate_dissipation_rate,
    random_admissible_trajectories,
)
from turnpike_lab.experiment import absolute_epsilons, build_instance, run_experiment, run_oracle, solve_options
from turnpike_lab.model import BoxConstraints, CostSpec, LinearDynamics, ProblemInstance, SpatialGrid, heat_instance
from turnpike_lab.ocp import SolveOptions, gradient_via_adjoint, reduced_cost, solve, solve_periodic
from turnpike_lab.static import (
    SemilinearProblem,
    check_strict_strong_duality,
    kkt_residuals,
    lagrangian,
    solve_static_lq,
    solve_static_semilinear,
)
from turnpike_lab.turnpike import PowerRate, TurnpikeSet, horizon_sweep, integral_turnpike, measure_Q_eps

CONFIGS = pathlib.Path(__file__).parents[1] / "configs"
SAMPLES = 100


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {number}: {detail}"

    return emit


@pytest.fixture(scope="module")
def sweep():
    """The reference heat sweep, certified on the random probe collection."""
    cfg = load_config(CONFIGS / "heat_sweep.json")
    base = build_instance(cfg)
    static = solve_static_lq(base)
    probe = random_admissible_trajectories(base, SAMPLES, seed=cfg.seed)
    eps = absolute_epsilons(cfg, base)
    t0 = time.perf_counter()
    rep = horizon_sweep(base, cfg.horizons, eps, solve_options(cfg), static, certify_with=probe)
    return base, static, probe, eps, rep, time.perf_counter() - t0


def test_criterion_01_kkt_certificate(verdict):
    t0 = time.perf_counter()
    inst = reference_heat()
    sol = solve_static_lq(inst)
    r = kkt_residuals(inst, sol)
    elapsed = time.perf_counter() - t0
    comp = max(r["complementarity_a"], r["complementarity_b"])
    ok = sol.kkt_residual <= 1e-8 and comp <= 1e-8 and elapsed < 1.0
    verdict(1, ok, f"kkt {sol.kkt_residual:.2e}, complementarity {comp:.2e}, {elapsed:.3f}s")


def test_criterion_02_lagrangian_identity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    inst = reference_heat()
    sol = solve_static_lq(inst)
    h = inst.weight
    worst_rel = 0.0
    for _ in range(100):
        y = sol.y_s + rng.standard_normal(inst.n)
        u = rng.uniform(-0.99, 0.99, inst.m)
        L = lagrangian(inst, y, u, sol)
        expect = sol.value + 0.5 * h * (np.sum((y - sol.y_s) ** 2) + np.sum((u - sol.u_s) ** 2))
        worst_rel = max(worst_rel, abs(L - expect) / max(abs(expect), 1e-300))
    # bounds active: only the inequality survives
    sat = reference_heat(scale=200.0)
    ssol = solve_static_lq(sat)
    min_slack = np.inf
    for _ in range(100):
        y = ssol.y_s + 10 * rng.standard_normal(sat.n)
        u = rng.uniform(-1.0, 1.0, sat.m)
        L = lagrangian(sat, y, u, ssol)
        quad = 0.5 * h * (np.sum((y - ssol.y_s) ** 2) + np.sum((u - ssol.u_s) ** 2))
        min_slack = min(min_slack, (L - ssol.value - quad) / max(1.0, abs(L)))
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= 1e-9 and min_slack >= -1e-9 and elapsed < 1.0
    verdict(2, ok, f"identity rel err {worst_rel:.2e}, inequality slack {min_slack:.2e}, {elapsed:.3f}s")


def _fd_gradient(inst, u, step=1e-6):
    g = np.zeros_like(u)
    for idx in np.ndindex(*u.shape):
        e = np.zeros_like(u)
        e[idx] = step
        g[idx] = (reduced_cost(inst, u + e) - reduced_cost(inst, u - e)) / (2 * step)
    return g


def test_criterion_03_gradient(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        n, nt = int(rng.integers(1, 6)), int(rng.integers(2, 11))
        m = int(rng.integers(1, n + 1))
        A = -np.eye(n) * rng.uniform(0.5, 3.0) + 0.3 * rng.standard_normal((n, n))
        inst = ProblemInstance(
            LinearDynamics(A, rng.standard_normal((n, m))),
            CostSpec(rng.standard_normal(n), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)),
            BoxConstraints.uniform(m, -1.0, 1.0),
            0.1 * nt,
            nt,
            y0=rng.standard_normal(n),
        )
        u = rng.uniform(-1, 1, (nt, m))
        g, fd = gradient_via_adjoint(inst, u), _fd_gradient(inst, u)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8 * np.max(np.abs(fd)))
        worst = max(worst, float(np.max(rel)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 5.0
    verdict(3, ok, f"max relative error {worst:.2e}, {elapsed:.3f}s")


def test_criterion_04_oracle(verdict):
    t0 = time.perf_counter()
    cases = run_oracle(load_config(CONFIGS / "heat_sweep.json"))
    elapsed = time.perf_counter() - t0
    excess = max(c.solver_value - c.oracle_value for c in cases)
    ok = len(cases) >= 5 and all(c.ok for c in cases) and max(c.search_space for c in cases) <= 10**5 and elapsed < 30
    verdict(4, ok, f"{len(cases)} instances, max(solver - oracle) {excess:.2e}, {elapsed:.2f}s")


def test_criterion_05_dissipativity(sweep, verdict):
    base, static, probe, _, rep, sweep_time = sweep
    t0 = time.perf_counter()
    h = base.weight
    S_a, w_a = StorageFunction.half_norm(h), SupplyRate.bilinear(base)
    min_a = min(check_dissipation(tr, S_a, w_a).min_residual for tr in probe)
    rate_a = estimate_dissipation_rate(probe, S_a, w_a).rate
    lam1 = base.poincare_constant
    S_b, w_b = StorageFunction.from_multiplier(static, h), SupplyRate.shifted_cost(base, static)
    trajs = list(probe) + [r.trajectory for r in rep.rows]
    min_b = min(check_dissipation(tr, S_b, w_b).min_residual for tr in trajs)
    elapsed = time.perf_counter() - t0
    ok = min_a >= -1e-8 and rate_a >= min(lam1, 1.0) - 1e-3 and min_b >= -1e-8 and elapsed < 30
    verdict(
        5,
        ok,
        f"(a) min residual {min_a:.2e}, rate {rate_a:.4f} vs {min(lam1, 1.0) - 1e-3:.4f}; "
        f"(b) min residual {min_b:.2e} over {len(trajs)} trajectories; {elapsed:.2f}s",
    )


def test_criterion_06_gap_rate(sweep, verdict):
    *_, rep, sweep_time = sweep
    slope = rep.fit.slope if rep.fit else float("nan")
    scaled = [r.scaled_gap for r in rep.rows[-4:]]
    ratio = max(scaled) / min(scaled) if min(scaled) > 0 else float("inf")
    ok = -1.3 <= slope <= -0.7 and ratio <= 10 and sweep_time < 300
    verdict(6, ok, f"slope {slope:.4f}, scaled gap ratio {ratio:.3f}, sweep {sweep_time:.2f}s")


def test_criterion_07_measure_turnpike(sweep, verdict):
    *_, eps, rep, _ = sweep
    e = eps[0]  # 0.1 * |y_d|_h
    bound = rep.uniform_measure_bound(e) if rep.rate > 0 else float("nan")
    q = [r.measures[e] for r in rep.rows]
    ok = rep.rate > 0 and all(qi <= bound + 1e-6 for qi in q) and q[-1] <= 1.1 * np.median(q)
    verdict(7, ok, f"max |Q| {max(q):.3f} <= 2M/alpha {bound:.3f}; last {q[-1]:.3f} vs median {np.median(q):.3f}")


def test_criterion_08_uniform_l2(sweep, verdict):
    *_, rep, _ = sweep
    l2 = [r.l2_deviation for r in rep.rows]
    ok = l2[-1] <= 1.1 * np.median(l2)
    verdict(8, ok, f"last {l2[-1]:.5f} vs 1.1 x median {1.1 * np.median(l2):.5f}")


def test_criterion_09_markov(sweep, verdict):
    base, static, probe, eps, rep, _ = sweep
    beta = PowerRate(rep.rate)
    s = TurnpikeSet.from_static(static, base.weight)
    worst = -np.inf
    for tr in [r.trajectory for r in rep.rows] + list(probe):
        it = integral_turnpike(tr, s, beta)
        for e in eps:
            worst = max(worst, measure_Q_eps(tr, s, e) / tr.horizon - it / beta(e))
    ok = worst <= 1e-12
    verdict(9, ok, f"max(|Q|/T - IT/beta(eps)) = {worst:.2e}")


def test_criterion_10_periodic(verdict):
    t0 = time.perf_counter()
    opts = SolveOptions(periodic=True)
    # constant target: the orbit collapses to the static pair
    inst = reference_heat().replace(y0=None)
    static = solve_static_lq(inst)
    res = solve_periodic(inst, opts)
    dev = float(np.max(np.sqrt(inst.weight * np.sum((res.trajectory.states - static.y_s) ** 2, axis=1))))
    dval = abs(res.value - static.value)

    # sinusoidal target: compare the orbit with the point set
    grid = SpatialGrid(15)
    dt = 0.02
    tt = np.arange(round(1 / dt)) * dt
    samples = 10 * np.sin(2 * np.pi * tt)[:, None] * np.sin(np.pi * grid.nodes)[None, :]
    per = heat_instance(grid, samples, horizon=1.0, dt=dt, period=1.0)
    orbit_res = solve_periodic(per, opts)
    orbit = orbit_res.trajectory
    long = heat_instance(grid, samples, horizon=8.0, dt=dt, period=1.0, y0=np.zeros(grid.n))
    traj = solve(long).trajectory
    pstat = solve_static_lq(long)
    point = TurnpikeSet.from_static(pstat, grid.h, include_control=False)
    orbit_set = TurnpikeSet.from_orbit(orbit, grid.h)
    # eps relative to how far the orbit itself strays from the static point
    scale = float(np.max(np.sqrt(grid.h * np.sum((orbit.states - pstat.y_s) ** 2, axis=1))))
    pairs = []
    for frac in (0.1, 0.25, 0.5):
        e = frac * scale
        pairs.append((measure_Q_eps(traj, orbit_set, e), measure_Q_eps(traj, point, e)))
    elapsed = time.perf_counter() - t0
    ok = (
        dev <= 1e-5
        and dval <= 1e-6
        and orbit_res.periodicity_gap <= 1e-6
        and all(qo < qp for qo, qp in pairs)
        and elapsed < 60
    )
    shown = ", ".join(f"{qo:.2f}<{qp:.2f}" for qo, qp in pairs)
    verdict(
        10,
        ok,
        f"constant: max dev {dev:.2e}, |J_per - J_s| {dval:.2e}; sinusoidal: gap {orbit_res.periodicity_gap:.2e}, "
        f"|Q| orbit<point {shown}; {elapsed:.2f}s",
    )


def test_criterion_11_semilinear(verdict):
    t0 = time.perf_counter()
    grid = SpatialGrid(15)
    yd = np.sin(np.pi * grid.nodes)
    yd *= 1e-3 / np.sqrt(grid.h * yd @ yd)
    sol = solve_static_semilinear(grid, yd)
    chk = check_strict_strong_duality(SemilinearProblem(grid, yd), sol, 2000, seed=0, radius=0.1)
    elapsed = time.perf_counter() - t0
    ok = sol.kkt_residual <= 1e-10 and chk.rate >= 0.25 and elapsed < 5
    verdict(11, ok, f"Newton residual {sol.kkt_residual:.2e}, sampled rate {chk.rate:.4f}, {elapsed:.2f}s")


@pytest.mark.parametrize("name", ["heat_sweep.json", "trivial.json", "semilinear.json"])
def test_criterion_12_reproducible(name, tmp_path, verdict):
    cfg = load_config(CONFIGS / name)
    a = run_experiment(cfg.replace(output_dir=str(tmp_path / "a")))
    b = run_experiment(cfg.replace(output_dir=str(tmp_path / "b")))
    same = (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    verdict(12, same and a.status == b.status, f"{name}: report.csv byte-identical={same}, exit {a.status}/{b.status}")
