import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from turnpike_lab.errors import (
    ConstraintViolation,
    EmptyControlSupport,
    InfeasibleBox,
    SingularGenerator,
    SolveFailure,
)
from turnpike_lab.model import (
    BoxConstraints,
    CostSpec,
    LinearDynamics,
    ProblemInstance,
    SpatialGrid,
    Trajectory,
    build_control_injection,
    build_laplacian_1d,
    constant_trajectory,
    energy_bound,
    heat_instance,
    inner_h,
    norm_h,
    simulate,
    step_implicit_euler,
)


def test_grid_mesh_width():
    g = SpatialGrid(15, 2.0)
    assert g.h * (g.n + 1) == pytest.approx(2.0, rel=1e-12)
    assert g.nodes[0] == pytest.approx(g.h)
    assert g.nodes[-1] == pytest.approx(2.0 - g.h)


@pytest.mark.parametrize("n, length", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_grid_rejects_bad_input(n, length):
    with pytest.raises(ValueError):
        SpatialGrid(n, length)


def test_laplacian_single_node():
    np.testing.assert_array_equal(build_laplacian_1d(SpatialGrid(1, 1.0)), [[-8.0]])


def test_laplacian_three_nodes():
    A = build_laplacian_1d(SpatialGrid(3, 1.0))
    np.testing.assert_array_equal(np.diag(A), [-32.0] * 3)
    np.testing.assert_array_equal(np.diag(A, 1), [16.0] * 2)
    np.testing.assert_array_equal(np.diag(A, -1), [16.0] * 2)
    assert A[0, 2] == 0.0


def test_laplacian_smallest_eigenvalue_matches_dense_oracle():
    A = build_laplacian_1d(SpatialGrid(3, 1.0))
    # oracle: general (nonsymmetric) dense eigensolver
    lam = np.min(np.real(np.linalg.eigvals(-A)))
    assert lam == pytest.approx(32 * (1 - np.cos(np.pi / 4)), rel=1e-12)
    assert lam == pytest.approx(9.3726, abs=1e-4)
    assert LinearDynamics(A, np.eye(3)).poincare_constant == pytest.approx(lam, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 7, 15])
def test_laplacian_symmetric_negative_definite(n):
    A = build_laplacian_1d(SpatialGrid(n))
    assert np.max(np.abs(A - A.T)) == 0.0
    assert np.all(np.linalg.eigvalsh(A) < 0)


def test_poincare_constant_reference_value():
    dyn = LinearDynamics(build_laplacian_1d(SpatialGrid(15)), np.eye(15))
    h = 1 / 16
    assert dyn.poincare_constant == pytest.approx(4 / h**2 * np.sin(np.pi * h / 2) ** 2, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-1e3, 1e3)))
def test_discrete_poincare_inequality(y):
    A = build_laplacian_1d(SpatialGrid(9))
    lam = LinearDynamics(A, np.eye(9)).poincare_constant
    lhs = y @ (-A) @ y
    assert lhs >= lam * (y @ y) - 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize(
    "support, diag",
    [([1, 2, 3], [1, 1, 1]), ([2], [0, 1, 0]), (range(1, 3), [1, 1, 0])],
)
def test_control_injection(support, diag):
    B, mask = build_control_injection(SpatialGrid(3), support)
    np.testing.assert_array_equal(B, np.diag(diag))
    np.testing.assert_array_equal(mask, diag)


def test_control_injection_empty_support():
    with pytest.raises(EmptyControlSupport):
        build_control_injection(SpatialGrid(4), [])


def test_control_injection_out_of_range():
    with pytest.raises(ValueError):
        build_control_injection(SpatialGrid(3), [4])


def test_box_rejects_crossed_bounds():
    with pytest.raises(InfeasibleBox):
        BoxConstraints([0.0, 1.0], [1.0, 0.0])


def test_box_allows_infinite_entries():
    box = BoxConstraints([-np.inf, 0.0], [np.inf, 2.0])
    np.testing.assert_array_equal(box.project([[-5.0, 3.0]]), [[-5.0, 2.0]])
    assert not box.bounded


def test_periodic_target_needs_two_samples():
    with pytest.raises(ValueError):
        CostSpec(np.zeros((1, 3)), period=1.0)


def test_periodic_target_interpolates_and_wraps():
    samples = np.array([[0.0], [1.0]])
    c = CostSpec(samples, period=2.0)
    assert c.target_at(0.5)[0] == pytest.approx(0.5)
    assert c.target_at(1.5)[0] == pytest.approx(0.5)
    assert c.target_at(2.0)[0] == pytest.approx(0.0)


@pytest.mark.parametrize("weight", [0.0, -1.0])
def test_cost_weights_positive(weight):
    with pytest.raises(ValueError):
        CostSpec(np.zeros(2), control_weight=weight)


def test_mesh_inner_product():
    x = np.array([1.0, 2.0])
    assert inner_h(x, x, 0.5) == pytest.approx(2.5)
    assert norm_h(x, 0.5) == pytest.approx(np.sqrt(2.5))


def test_step_identity_when_a_is_zero():
    dyn = LinearDynamics(np.zeros((2, 2)), np.eye(2))
    y = np.array([0.3, -1.2])
    np.testing.assert_array_equal(step_implicit_euler(dyn, y, np.zeros(2), 0.1), y)


@pytest.mark.parametrize("a, dt", [(-2.0, 0.1), (-0.5, 1.0), (0.3, 0.5)])
def test_step_scalar_closed_form(a, dt):
    dyn = LinearDynamics([[a]], [[0.0]])
    y = np.array([1.7])
    assert step_implicit_euler(dyn, y, np.zeros(1), dt)[0] == pytest.approx(1.7 / (1 - dt * a), rel=1e-14)


def test_step_matches_dense_solve_oracle():
    rng = np.random.default_rng(3)
    A = build_laplacian_1d(SpatialGrid(3))
    dyn = LinearDynamics(A, np.eye(3))
    y, u = rng.standard_normal(3), rng.standard_normal(3)
    dt = 0.02
    expect = np.linalg.solve(np.eye(3) - dt * A, y + dt * u)
    np.testing.assert_allclose(step_implicit_euler(dyn, y, u, dt), expect, rtol=1e-12, atol=1e-12)


def test_step_singular_generator():
    dyn = LinearDynamics([[10.0]], [[1.0]])
    with pytest.raises(SolveFailure):
        step_implicit_euler(dyn, np.ones(1), np.zeros(1), 0.1)
    assert issubclass(SingularGenerator, SolveFailure)


def test_step_rejects_nonpositive_dt():
    dyn = LinearDynamics([[-1.0]], [[1.0]])
    with pytest.raises(ValueError):
        step_implicit_euler(dyn, np.ones(1), np.zeros(1), 0.0)


def _heat(n=7, T=1.0, dt=0.05, y0=None):
    g = SpatialGrid(n)
    return heat_instance(g, np.zeros(n), horizon=T, dt=dt, y0=y0)


def test_simulate_zero_is_equilibrium():
    inst = _heat(y0=np.zeros(7))
    tr = simulate(inst, np.zeros((inst.nt, 7)))
    assert np.all(tr.states == 0.0)


def test_simulate_heat_norm_monotone():
    g = SpatialGrid(7)
    y0 = np.random.default_rng(0).standard_normal(7)
    inst = _heat(y0=y0)
    tr = simulate(inst, np.zeros((inst.nt, 7)))
    norms = np.sqrt(g.h * np.sum(tr.states**2, axis=1))
    assert np.all(np.diff(norms) <= 1e-12)
    assert norms[-1] < norms[0]


def test_simulate_deterministic():
    rng = np.random.default_rng(1)
    inst = _heat(y0=rng.standard_normal(7))
    u = rng.uniform(-1, 1, (inst.nt, 7))
    a, b = simulate(inst, u), simulate(inst, u)
    assert a.states.tobytes() == b.states.tobytes()


@pytest.mark.parametrize("k, j", [(0, 0), (5, 3), (19, 6)])
def test_simulate_reports_first_violation(k, j):
    inst = _heat(y0=np.zeros(7))
    u = np.zeros((inst.nt, 7))
    u[k, j] = 1.5
    if k < inst.nt - 1:
        u[-1, 0] = -2.0  # a later violation must not win
    with pytest.raises(ConstraintViolation) as exc:
        simulate(inst, u)
    assert exc.value.index == k


def test_simulate_shape_mismatch():
    inst = _heat(y0=np.zeros(7))
    with pytest.raises(ValueError):
        simulate(inst, np.zeros((inst.nt + 1, 7)))


def test_instance_requires_dimensions():
    with pytest.raises(ValueError):
        ProblemInstance(
            LinearDynamics(np.eye(2) * -1, np.eye(2)),
            CostSpec(np.zeros(3)),
            BoxConstraints.uniform(2, -1, 1),
            1.0,
            10,
        )


def test_with_horizon_keeps_dt():
    inst = _heat(T=1.0, dt=0.05)
    longer = inst.with_horizon(4.0)
    assert longer.nt == 80
    assert longer.dt == pytest.approx(inst.dt)
    with pytest.raises(ValueError):
        inst.with_horizon(1.01)


def test_trajectory_rejects_nonuniform_times():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.1, 0.3]), np.zeros((3, 1)), np.zeros((2, 1)))


def test_constant_trajectory_and_window():
    inst = _heat(y0=np.zeros(7))
    tr = constant_trajectory(inst, np.ones(7), np.zeros(7))
    assert tr.states.shape == (inst.nt + 1, 7)
    w = tr.window(2, 5)
    assert w.nt == 3
    assert w.times[0] == pytest.approx(2 * inst.dt)


def test_energy_bound_dominates_trajectories():
    rng = np.random.default_rng(5)
    g = SpatialGrid(7)
    inst = _heat(T=4.0, y0=rng.standard_normal(7))
    R = energy_bound(inst)
    for _ in range(20):
        u = rng.choice([-1.0, 1.0], size=(inst.nt, 7))
        tr = simulate(inst, u)
        assert np.max(np.sqrt(g.h * np.sum(tr.states**2, axis=1))) <= R + 1e-12
