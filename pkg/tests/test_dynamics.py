import numpy as np
import pytest
from scipy.spatial.transform import Rotation
import yaml

from mpc_autotune.config import ROBOTS_PATH
from mpc_autotune.dynamics import (
    JointState,
    bias_forces,
    forward_dynamics,
    forward_kinematics,
    frame_jacobian,
    gravity_vector,
    integrate,
    inverse_dynamics,
    kinetic_energy,
    load_model,
    mass_matrix,
    pose_and_jacobian,
    potential_energy,
    step,
)
from mpc_autotune.utils.core import DimensionError, DivergenceError, ErrorCode, ModelFileError


def _transform_chain_oracle(path, q):
    """End-effector position by multiplying 4x4 transforms read straight from the model file."""
    data = yaml.safe_load(path.read_text())
    T = np.eye(4)
    for joint, angle in zip(data["joints"], q):
        origin = np.eye(4)
        origin[:3, :3] = Rotation.from_euler("xyz", joint["origin"]["rpy"]).as_matrix()
        origin[:3, 3] = joint["origin"]["xyz"]
        axis = np.asarray(joint["axis"], dtype=float)
        spin = np.eye(4)
        spin[:3, :3] = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()
        T = T @ origin @ spin
    ee = np.eye(4)
    ee[:3, 3] = data["end_effector"]["xyz"]
    return (T @ ee)[:3, 3]


def test_planar_forward_kinematics(planar2):
    np.testing.assert_allclose(forward_kinematics(planar2, np.zeros(2)).p, [2.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(forward_kinematics(planar2, [np.pi / 2, 0.0]).p, [0.0, 2.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_forward_kinematics_matches_transform_chain(ur10e, seed):
    q = np.random.default_rng(seed).uniform(-np.pi, np.pi, 6)
    expected = _transform_chain_oracle(ROBOTS_PATH / "ur10e.yaml", q)
    np.testing.assert_allclose(forward_kinematics(ur10e, q).p, expected, atol=1e-12)


def test_forward_kinematics_is_batched(ur10e, random_states):
    q, _ = random_states(ur10e, 5)
    batched = forward_kinematics(ur10e, q)
    for i in range(5):
        single = forward_kinematics(ur10e, q[i])
        np.testing.assert_allclose(batched.p[i], single.p, atol=1e-12)
        np.testing.assert_allclose(batched.R[i], single.R, atol=1e-12)


def test_single_link_jacobian(make_single_joint):
    rod = make_single_joint(axis=(0, 0, 1), com=(0.5, 0, 0), inertia=(1e-4, 0, 0, 0.08, 0, 0.08))
    J = frame_jacobian(rod, np.zeros(1))
    assert J.shape == (6, 1)
    np.testing.assert_allclose(J[:3, 0], [0.0, 1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(J[3:, 0], [0.0, 0.0, 1.0], atol=1e-15)


def test_jacobian_of_end_effector_on_axis_is_zero(make_single_joint):
    model = make_single_joint(axis=(0, 0, 1), com=(0.5, 0, 0), inertia=(1e-4, 0, 0, 0.08, 0, 0.08), ee=(0, 0, 0))
    J = frame_jacobian(model, np.array([0.7]))
    np.testing.assert_array_equal(J[:3], np.zeros((3, 1)))


@pytest.mark.parametrize("name", ["planar2", "ur10e"])
def test_jacobian_matches_finite_differences(name, request, rng):
    model = request.getfixturevalue(name)
    h = 1e-6
    for _ in range(10):
        q = rng.uniform(-np.pi, np.pi, model.n_q)
        J = frame_jacobian(model, q)
        for j in range(model.n_q):
            dq = np.zeros(model.n_q)
            dq[j] = h
            fd = (forward_kinematics(model, q + dq).p - forward_kinematics(model, q - dq).p) / (2 * h)
            np.testing.assert_allclose(J[:3, j], fd, atol=1e-6)


def test_point_mass_pendulum_inertia(pendulum):
    for q in (-1.0, 0.0, 0.4):
        np.testing.assert_allclose(mass_matrix(pendulum, np.array([q])), [[1.0]], atol=1e-14)


def test_planar_mass_matrix_closed_form(planar2, rng):
    for q2 in rng.uniform(-np.pi, np.pi, 5):
        M = mass_matrix(planar2, np.array([0.3, q2]))
        c = np.cos(q2)
        expected = np.array([[5.0 / 3.0 + c, 1.0 / 3.0 + 0.5 * c], [1.0 / 3.0 + 0.5 * c, 1.0 / 3.0]])
        np.testing.assert_allclose(M, expected, atol=1e-12)


def test_mass_matrix_symmetric_and_positive_definite(ur10e, random_states):
    q, _ = random_states(ur10e, 100)
    M = mass_matrix(ur10e, q)
    assert np.max(np.abs(M - np.swapaxes(M, -1, -2))) < 1e-12
    np.linalg.cholesky(M)


def test_mass_matrix_columns_match_inverse_dynamics(ur10e, random_states):
    q, _ = random_states(ur10e, 100)
    M = mass_matrix(ur10e, q)
    zeros = np.zeros_like(q)
    for j in range(ur10e.n_q):
        a = zeros.copy()
        a[:, j] = 1.0
        column = inverse_dynamics(ur10e, q, zeros, a, gravity=np.zeros(3))
        np.testing.assert_allclose(M[:, :, j], column, atol=1e-10)


def test_horizontal_pendulum_gravity(pendulum):
    state = JointState.of([0.0], [0.0])
    np.testing.assert_allclose(bias_forces(pendulum, state), [9.81], atol=1e-12)
    np.testing.assert_allclose(forward_dynamics(pendulum, state, np.zeros(1)), [-9.81], atol=1e-12)


def test_hanging_pendulum_needs_no_torque(pendulum):
    np.testing.assert_allclose(gravity_vector(pendulum, np.array([-np.pi / 2])), [0.0], atol=1e-12)


def test_bias_at_rest_is_gravity(ur10e, random_states):
    q, _ = random_states(ur10e, 3)
    for qi in q:
        np.testing.assert_array_equal(bias_forces(ur10e, JointState.of(qi, np.zeros(6))), gravity_vector(ur10e, qi))
        zero_g = ur10e.with_gravity(np.zeros(3))
        np.testing.assert_array_equal(bias_forces(zero_g, JointState.of(qi, np.zeros(6))), np.zeros(6))


def test_gravity_sign_flip(ur10e):
    q = np.array([0.1, -1.2, 1.0, -0.4, 0.7, 0.2])
    flipped = ur10e.with_gravity(-ur10e.gravity)
    np.testing.assert_array_equal(gravity_vector(flipped, q), -gravity_vector(ur10e, q))


def test_equilibrium_torque_gives_zero_acceleration(ur10e, random_states):
    q, v = random_states(ur10e, 5)
    for qi, vi in zip(q, v):
        state = JointState.of(qi, vi)
        np.testing.assert_allclose(forward_dynamics(ur10e, state, bias_forces(ur10e, state)), np.zeros(6), atol=1e-9)


def test_forward_dynamics_residual(ur10e, random_states, rng):
    q, v = random_states(ur10e, 100)
    u = rng.uniform(0.1 * ur10e.u_min, 0.1 * ur10e.u_max, size=(100, 6))
    state = JointState(q, v)
    a = forward_dynamics(ur10e, state, u)
    M = mass_matrix(ur10e, q)
    residual = np.einsum("bij,bj->bi", M, a) + bias_forces(ur10e, state) - u
    assert np.max(np.linalg.norm(residual, axis=1)) < 1e-10 * (1.0 + np.max(np.abs(u)))


def test_step_at_rest_in_equilibrium(pendulum):
    state = JointState.of([-np.pi / 2], [0.0])
    nxt = step(pendulum, state, gravity_vector(pendulum, state.q), 1e-3)
    np.testing.assert_allclose(nxt.q, state.q, atol=1e-15)
    np.testing.assert_allclose(nxt.v, state.v, atol=1e-12)


def test_step_rejects_bad_input(planar2):
    state = JointState.of([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        step(planar2, state, np.zeros(2), 0.0)
    with pytest.raises(DimensionError):
        step(planar2, state, np.zeros(3), 1e-3)


def test_free_double_pendulum_conserves_energy(planar2):
    model = planar2.with_gravity([0.0, -9.81, 0.0])
    state = JointState.of([0.3, 0.2], [0.0, 0.0])
    dt, steps = 1e-4, 10_000

    def energy(s):
        return kinetic_energy(model, s) + potential_energy(model, s.q)

    e0 = energy(state)
    drift, swing = 0.0, 0.0
    for i in range(1, steps + 1):
        state = step(model, state, np.zeros(2), dt)
        if i % 100 == 0:
            drift = max(drift, abs(energy(state) - e0))
            swing = max(swing, kinetic_energy(model, state))
    assert swing > 0.1
    assert drift < 0.005 * swing


def test_integration_converges_at_first_order(planar2):
    model = planar2.with_gravity([0.0, -9.81, 0.0])
    horizon = 0.2

    def final_q(dt):
        state = JointState.of([0.3, 0.2], [0.5, -0.5])
        for _ in range(int(round(horizon / dt))):
            state = step(model, state, np.zeros(2), dt)
        return state.q

    reference = final_q(2.5e-5)
    errors = [np.linalg.norm(final_q(dt) - reference) for dt in (4e-3, 2e-3, 1e-3)]
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 0.8)


def test_integrate_matches_batched_steps(planar2):
    state = JointState.of([0.3, -0.4], [0.2, 0.1])
    u = np.array([1.5, -0.5])
    single = integrate(planar2, state, u, 5e-4, substeps=4)
    q, v = state.q[None], state.v[None]
    for _ in range(4):
        nxt = step(planar2, JointState(q, v), u[None], 5e-4)
        q, v = nxt.q, nxt.v
    np.testing.assert_allclose(single.q, q[0], atol=1e-12)
    np.testing.assert_allclose(single.v, v[0], atol=1e-12)


def test_integrate_rejects_bad_input_and_reports_divergence(planar2):
    state = JointState.of([0.3, -0.4], [0.0, 0.0])
    with pytest.raises(ValueError):
        integrate(planar2, state, np.zeros(2), 5e-4, substeps=0)
    with pytest.raises(DimensionError):
        integrate(planar2, JointState(state.q[None], state.v[None]), np.zeros((1, 2)), 5e-4)
    with pytest.raises(DivergenceError) as info:
        integrate(planar2, state, np.full(2, 1e300), 5e-4, substeps=3)
    assert info.value.code is ErrorCode.NON_FINITE_STATE


def test_pose_and_jacobian_match_batched_kinematics(ur10e, random_states):
    q, _ = random_states(ur10e, 4)
    poses = forward_kinematics(ur10e, q)
    jacobians = frame_jacobian(ur10e, q)
    for i in range(4):
        pose, J = pose_and_jacobian(ur10e, q[i])
        np.testing.assert_allclose(pose.p, poses.p[i], atol=1e-12)
        np.testing.assert_allclose(pose.R, poses.R[i], atol=1e-12)
        np.testing.assert_allclose(J, jacobians[i], atol=1e-12)
    with pytest.raises(DimensionError):
        pose_and_jacobian(ur10e, q)


def test_model_file_errors_carry_the_line(tmp_path):
    text = (ROBOTS_PATH / "planar2.yaml").read_text()
    bad = tmp_path / "bad.yaml"
    bad.write_text(text.replace("mass: 1.0", "mass: -1.0", 1))
    with pytest.raises(ModelFileError) as info:
        load_model(bad)
    assert info.value.code is ErrorCode.MODEL_FILE_INVALID
    assert info.value.line is not None and info.value.line > 1

    old = tmp_path / "old.yaml"
    old.write_text(text.replace("mpc-autotune-robot/1", "mpc-autotune-robot/0"))
    with pytest.raises(ModelFileError) as info:
        load_model(old)
    assert info.value.code is ErrorCode.MODEL_VERSION_UNSUPPORTED
