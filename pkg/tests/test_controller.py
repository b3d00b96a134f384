import numpy as np
import pytest

from mpc_autotune.controller import (
    GainSet,
    MpcSnapshot,
    control_tick,
    feedback_command,
    node_index,
    saturate_and_compensate,
)
from mpc_autotune.ddp import DdpSolution
from mpc_autotune.dynamics import JointState, gravity_vector
from mpc_autotune.utils.core import DimensionError, ErrorCode, StaleSolutionError

ZERO_GAINS = GainSet(K_p=0.0, K_d=0.0, K_pc=(0.0, 0.0, 0.0), K_dc=(0.0, 0.0, 0.0))


def _solution(model, N=8, seed=0):
    rng = np.random.default_rng(seed)
    n = model.n_q
    xs = np.concatenate([rng.uniform(-1, 1, (N + 1, n)), rng.uniform(-0.5, 0.5, (N + 1, n))], axis=1)
    us = rng.uniform(-5, 5, (N, n))
    return DdpSolution(
        xs=xs,
        us=us,
        k=np.zeros((N, n)),
        K=np.zeros((N, n, 2 * n)),
        converged=True,
        iterations=1,
        expected_improvement=0.0,
        wall_time=0.0,
    )


def test_matching_state_returns_feedforward(ur10e):
    solution = _solution(ur10e)
    k = 3
    state = JointState.from_x(solution.xs[k + 1])
    raw = feedback_command(solution, k, state, ur10e, GainSet(K_p=28.7, K_d=0.18))
    np.testing.assert_allclose(raw, solution.us[k], atol=1e-12)


def test_zero_gains_return_feedforward(ur10e):
    solution = _solution(ur10e)
    state = JointState.of(np.zeros(6), np.ones(6))
    np.testing.assert_array_equal(feedback_command(solution, 2, state, ur10e, ZERO_GAINS), solution.us[2])


def test_joint_position_gain(ur10e):
    solution = _solution(ur10e)
    target = JointState.from_x(solution.xs[1])
    q = target.q.copy()
    q[0] -= 1.0
    gains = GainSet(K_p=28.7, K_d=0.0, K_pc=(0.0, 0.0, 0.0), K_dc=(0.0, 0.0, 0.0))
    raw = feedback_command(solution, 0, JointState.of(q, target.v), ur10e, gains)
    np.testing.assert_allclose(raw - solution.us[0], [28.7, 0, 0, 0, 0, 0], atol=1e-12)


def test_feedback_is_linear_in_the_gains(ur10e):
    solution = _solution(ur10e)
    state = JointState.of(np.full(6, 0.2), np.full(6, -0.1))
    once = feedback_command(solution, 1, state, ur10e, GainSet(K_p=3.0, K_d=0.5, K_pc=(2.0, 1.0, 4.0), K_dc=(1.0, 1.0, 1.0)))
    twice = feedback_command(solution, 1, state, ur10e, GainSet(K_p=6.0, K_d=1.0, K_pc=(4.0, 2.0, 8.0), K_dc=(2.0, 2.0, 2.0)))
    np.testing.assert_allclose(twice - solution.us[1], 2.0 * (once - solution.us[1]), rtol=1e-12, atol=1e-12)


def test_feedback_checks_node_and_dimensions(planar2):
    solution = _solution(planar2, N=4)
    state = JointState.of(np.zeros(2), np.zeros(2))
    with pytest.raises(IndexError):
        feedback_command(solution, 4, state, planar2, GainSet())
    with pytest.raises(DimensionError):
        feedback_command(solution, 0, JointState.of(np.zeros(3), np.zeros(3)), planar2, GainSet())


def test_saturation_without_gravity(planar2):
    q = np.array([0.2, -0.4])
    cmd = saturate_and_compensate(np.array([3.0, -7.0]), planar2, q)
    np.testing.assert_allclose(cmd.tau, [3.0, -7.0], atol=1e-12)
    assert not cmd.saturated.any()

    cmd = saturate_and_compensate(planar2.u_max + np.array([100.0, 0.0]), planar2, q)
    np.testing.assert_allclose(cmd.applied, planar2.u_max, atol=1e-12)
    np.testing.assert_array_equal(cmd.saturated, [True, False])


def test_horizontal_pendulum_is_compensated(pendulum):
    cmd = saturate_and_compensate(np.zeros(1), pendulum, np.zeros(1))
    np.testing.assert_allclose(cmd.tau, [-9.81], atol=1e-12)
    np.testing.assert_allclose(cmd.applied, [0.0], atol=1e-12)


def test_saturated_output_stays_within_limits(ur10e, rng):
    for _ in range(20):
        raw = rng.uniform(-1000, 1000, 6)
        q = rng.uniform(-np.pi, np.pi, 6)
        cmd = saturate_and_compensate(raw, ur10e, q)
        assert np.all(cmd.applied <= ur10e.u_max + 1e-9)
        assert np.all(cmd.applied >= ur10e.u_min - 1e-9)


def test_node_sequence_for_500hz_ticks():
    indices = [node_index(i * 0.002, 0.0, 0.0025) for i in range(10)]
    assert indices == [0, 0, 1, 2, 3, 4, 4, 5, 6, 7]
    assert node_index(0.37, 0.37, 0.0025) == 0


def test_tick_with_perfect_tracking_is_feedforward_minus_gravity(ur10e):
    solution = _solution(ur10e)
    snapshot = MpcSnapshot(solution, 1.0, 0.0025)
    state = JointState.from_x(solution.xs[1])
    cmd = control_tick(1.0, snapshot, state, ur10e, GainSet(K_p=5.0, K_d=2.0))
    assert cmd.node == 0
    expected = np.clip(solution.us[0], ur10e.u_min, ur10e.u_max) - gravity_vector(ur10e, state.q)
    np.testing.assert_allclose(cmd.tau, expected, atol=1e-10)


def test_stale_solution_is_a_realtime_violation(planar2):
    solution = _solution(planar2, N=4)
    snapshot = MpcSnapshot(solution, 0.0, 0.0025)
    state = JointState.of(np.zeros(2), np.zeros(2))
    control_tick(0.0099, snapshot, state, planar2, GainSet())
    with pytest.raises(StaleSolutionError) as info:
        control_tick(0.01, snapshot, state, planar2, GainSet())
    assert info.value.code is ErrorCode.STALE_SOLUTION


def test_linear_feedforward_interpolates(planar2):
    solution = _solution(planar2, N=4)
    snapshot = MpcSnapshot(solution, 0.0, 0.0025)
    state = JointState.from_x(solution.xs[1])
    half = control_tick(0.00125, snapshot, state, planar2, ZERO_GAINS, feedforward="linear")
    expected = 0.5 * (solution.us[0] + solution.us[1])
    np.testing.assert_allclose(half.raw, expected, atol=1e-12)


def test_gains_must_be_non_negative():
    with pytest.raises(ValueError):
        GainSet(K_p=-1.0)
    with pytest.raises(ValueError):
        GainSet(K_pc=(1.0, -0.1, 1.0))
