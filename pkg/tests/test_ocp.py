import numpy as np
import pytest

from mpc_autotune.dynamics import forward_kinematics
from mpc_autotune.ocp import (
    CostWeights,
    OcpProblem,
    barrier,
    barrier_gradient,
    cost_derivatives,
    discrete_dynamics,
    dynamics_derivatives,
    running_cost,
    terminal_cost,
    total_cost,
)
from mpc_autotune.trajectory import ReferenceSample


def _hold_problem(model, q, N=5, dt=0.0025, weights=None, offset=(0.0, 0.0, 0.0)):
    """Every node references the pose at ``q`` shifted by ``offset``."""
    pose = forward_kinematics(model, q)
    ref = ReferenceSample(pose.p + np.asarray(offset), pose.R, np.zeros(3))
    return OcpProblem.build(model, N, dt, [ref] * (N + 1), weights or CostWeights())


def _numeric_gradient(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = h
        grad[i] = (fn(x + dx) - fn(x - dx)) / (2 * h)
    return grad


def test_barrier_values():
    lo, hi = np.array([-1.0, -2.0]), np.array([1.0, 2.0])
    assert barrier([0.5, -1.5], lo, hi) == 0.0
    assert barrier([2.0, 0.0], lo, hi) == pytest.approx(1.0)
    assert barrier([0.0, -3.5], lo, hi) == pytest.approx(2.25)


def test_barrier_gradient_matches_finite_differences(rng):
    lo, hi = -np.ones(4), np.ones(4)
    points = [rng.uniform(-2, 2, 4) for _ in range(20)]
    points.append(np.array([1.0 + 1e-4, -1.0 - 1e-4, 0.999, 0.0]))
    for x in points:
        fd = _numeric_gradient(lambda z: barrier(z, lo, hi), x)
        np.testing.assert_allclose(barrier_gradient(x, lo, hi), fd, atol=1e-6)


def test_cost_on_reference_is_zero(ur10e):
    q = np.array([0.1, -1.4, 1.3, -1.2, -1.5, 0.2])
    problem = _hold_problem(ur10e, q)
    x = np.concatenate([q, np.zeros(6)])
    assert running_cost(problem, 0, x, np.zeros(6)) == pytest.approx(0.0, abs=1e-20)
    assert terminal_cost(problem, x) == pytest.approx(0.0, abs=1e-20)
    d = cost_derivatives(problem, 2, x, np.zeros(6))
    np.testing.assert_allclose(d.l_x, 0.0, atol=1e-12)
    np.testing.assert_allclose(d.l_u, 0.0, atol=1e-12)


def test_default_weights():
    w = CostWeights()
    assert (w.w_pos, w.w_rot, w.w_tau, w.w_v, w.w_lim_tau, w.w_lim_x) == (1e5, 1e-4, 1e-2, 1e-3, 10.0, 10.0)
    assert CostWeights(w_pos=3.3e4).w_pos_N == 3.3e4


def test_one_millimetre_error_costs_a_tenth(ur10e):
    q = np.array([0.1, -1.4, 1.3, -1.2, -1.5, 0.2])
    weights = CostWeights(w_rot=0.0, w_v=0.0, w_tau=0.0)
    problem = _hold_problem(ur10e, q, weights=weights, offset=(1e-3, 0.0, 0.0))
    x = np.concatenate([q, np.zeros(6)])
    assert running_cost(problem, 0, x, np.zeros(6)) == pytest.approx(0.1, rel=1e-9)


def test_terminal_cost_is_linear_in_w_pos(ur10e):
    q = np.array([0.1, -1.4, 1.3, -1.2, -1.5, 0.2])
    x = np.concatenate([q, np.zeros(6)])
    single = terminal_cost(_hold_problem(ur10e, q, offset=(2e-3, 0, 0)), x)
    double = terminal_cost(_hold_problem(ur10e, q, offset=(2e-3, 0, 0), weights=CostWeights(w_pos=2e5)), x)
    assert double == pytest.approx(2.0 * single)


def test_running_cost_rejects_terminal_node(planar2):
    problem = _hold_problem(planar2, np.array([0.3, 0.5]))
    with pytest.raises(IndexError):
        running_cost(problem, problem.N, np.zeros(4), np.zeros(2))


def test_total_cost_sums_running_and_terminal(planar2, rng):
    problem = _hold_problem(planar2, np.array([0.3, 0.5]), offset=(0.01, 0.0, 0.0))
    xs = rng.normal(size=(problem.N + 1, 4))
    us = rng.normal(size=(problem.N, 2))
    expected = problem.dt * sum(running_cost(problem, k, xs[k], us[k]) for k in range(problem.N))
    expected += terminal_cost(problem, xs[-1])
    assert total_cost(problem, xs, us) == pytest.approx(expected, rel=1e-12)


def test_cost_gradients_match_finite_differences(ur10e, rng):
    """Gradients at 50 random points, with limits violated often enough to exercise the barriers."""
    q_ref = np.array([0.1, -1.4, 1.3, -1.2, -1.5, 0.2])
    problem = _hold_problem(ur10e, q_ref, weights=CostWeights(w_rot=1.0), offset=(0.02, -0.01, 0.03))
    for _ in range(50):
        x = np.concatenate([q_ref + rng.normal(0, 0.3, 6), rng.uniform(-3.0, 3.0, 6)])
        u = rng.uniform(-400.0, 400.0, 6)
        d = cost_derivatives(problem, 1, x, u)
        fd_x = _numeric_gradient(lambda z: running_cost(problem, 1, z, u), x)
        fd_u = _numeric_gradient(lambda z: running_cost(problem, 1, x, z), u)
        np.testing.assert_allclose(d.l_x, fd_x, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd_x).max()))
        np.testing.assert_allclose(d.l_u, fd_u, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(fd_u).max()))


def test_control_hessian_inside_limits(planar2):
    problem = _hold_problem(planar2, np.array([0.3, 0.5]))
    d = cost_derivatives(problem, 0, np.array([0.3, 0.5, 0.1, -0.1]), np.array([1.0, -2.0]))
    np.testing.assert_allclose(d.l_uu, 2.0 * problem.weights.w_tau * np.eye(2))
    np.testing.assert_array_equal(d.l_ux, np.zeros((2, 4)))


def test_double_integrator_transition_jacobians(double_integrator):
    dt = 0.0025
    problem = _hold_problem(double_integrator, np.array([0.0]), dt=dt)
    for method in ("fd", "rnea"):
        f_x, f_u = dynamics_derivatives(problem, np.array([0.2, 0.1]), np.array([3.0]), method=method)
        np.testing.assert_allclose(f_u[:, 0], [dt**2, dt], rtol=1e-8)
        np.testing.assert_allclose(f_x, [[1.0, dt], [0.0, 1.0]], atol=1e-10)


def test_transition_jacobians_agree(ur10e, rng):
    problem = _hold_problem(ur10e, np.zeros(6))
    x = np.concatenate([rng.uniform(-np.pi, np.pi, 6), rng.uniform(-1, 1, 6)])
    u = rng.uniform(-50, 50, 6)
    fd_x, fd_u = dynamics_derivatives(problem, x, u, method="fd")
    rn_x, rn_u = dynamics_derivatives(problem, x, u, method="rnea")
    np.testing.assert_allclose(fd_x, rn_x, atol=1e-6)
    np.testing.assert_allclose(fd_u, rn_u, atol=1e-6)

    h = 1e-6
    numeric = np.column_stack(
        [
            (discrete_dynamics(problem, x + h * e, u) - discrete_dynamics(problem, x - h * e, u)) / (2 * h)
            for e in np.eye(12)
        ]
    )
    np.testing.assert_allclose(fd_x, numeric, atol=1e-6)
