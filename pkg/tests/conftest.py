import numpy as np
import pytest

from mpc_autotune.config import ROBOTS_PATH
from mpc_autotune.dynamics import JointSpec, LimitSpec, LinkSpec, RobotSpec, build_model, load_model


def _single_joint(axis, com, inertia, gravity=(0.0, 0.0, -9.81), ee=(1.0, 0.0, 0.0), limits=None):
    limits = limits or LimitSpec(q=(-10.0, 10.0), v=(-100.0, 100.0), u=(-1e4, 1e4))
    joint = JointSpec(
        name="j1",
        axis=list(axis),
        link=LinkSpec(mass=1.0, com=list(com), inertia=list(inertia)),
        limits=limits,
    )
    spec = RobotSpec(name="single", gravity=list(gravity), joints=[joint], end_effector={"xyz": list(ee)})
    return build_model(spec)


@pytest.fixture(scope="session")
def make_single_joint():
    return _single_joint


@pytest.fixture(scope="session")
def planar2():
    return load_model(ROBOTS_PATH / "planar2.yaml")


@pytest.fixture(scope="session")
def ur10e():
    return load_model(ROBOTS_PATH / "ur10e.yaml")


@pytest.fixture(scope="session")
def pendulum():
    """Point mass m = 1 at l = 1; q = 0 is horizontal, q = -pi/2 hangs down."""
    return _single_joint(axis=(0.0, -1.0, 0.0), com=(1.0, 0.0, 0.0), inertia=(0.0,) * 6)


@pytest.fixture(scope="session")
def double_integrator():
    """Unit inertia about z, COM on the axis, no gravity: a = u."""
    return _single_joint(
        axis=(0.0, 0.0, 1.0),
        com=(0.0, 0.0, 0.0),
        inertia=(0.1, 0.0, 0.0, 0.1, 0.0, 1.0),
        gravity=(0.0, 0.0, 0.0),
        limits=LimitSpec(q=(0.5, 0.6), v=(-1e3, 1e3), u=(-1e4, 1e4)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_states(rng):
    """Sampler of (q, v) batches inside the position limits and half the velocity limits."""

    def sample(model, count):
        q = rng.uniform(model.q_min, model.q_max, size=(count, model.n_q))
        v = rng.uniform(0.5 * model.v_min, 0.5 * model.v_max, size=(count, model.n_q))
        return q, v

    return sample


PLANAR_RUN = """\
episode:
  robot: planar2
  q_init: [0.5, 1.0]
  duration: 0.02
  deterministic_time: true
  shape:
    kind: square
    size: 0.02
    duration: 2.0
campaign:
  method: vanilla
  n_init: 3
  n_max: 4
  patience: 5
"""


@pytest.fixture
def planar_run(tmp_path):
    """Run config for a 10-tick planar2 episode and a 4-trial vanilla campaign."""
    path = tmp_path / "run.yaml"
    path.write_text(PLANAR_RUN)
    return path
