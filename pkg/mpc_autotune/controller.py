"""500 Hz torque command between MPC updates.

The raw command adds joint-space and task-space feedback toward the node k+1
targets of the latest solution to the node-k feedforward torque. It is then
saturated and gravity is subtracted; the robot (or the twin) adds g(q) back, so
the torque that actually acts on the joints is the saturated command.
"""

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .ddp import DdpSolution
from .dynamics import JointState, RobotModel, _check_dim, gravity_vector, pose_and_jacobian
from .utils.core import StaleSolutionError

FeedforwardMode = Literal["zoh", "linear"]

# floor() guard for tick times accumulated in floating point
_NODE_EPS = 1e-9


class GainSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    K_p: float = Field(default=1.0, ge=0, description="joint position gain, uniform over joints")
    K_d: float = Field(default=1.0, ge=0, description="joint velocity gain, uniform over joints")
    K_pc: tuple[float, float, float] = Field(default=(1.0, 1.0, 1.0), description="Cartesian position gain")
    K_dc: tuple[float, float, float] = Field(default=(1.0, 1.0, 1.0), description="Cartesian velocity gain")

    @field_validator("K_pc", "K_dc")
    @classmethod
    def _non_negative(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if min(value) < 0:
            raise ValueError("Cartesian gains must be >= 0")
        return value


@dataclass(frozen=True, eq=False)
class ControlCommand:
    tau: np.ndarray  # sent to the robot, gravity already removed
    saturated: np.ndarray  # per joint
    raw: np.ndarray  # pre-saturation command
    gravity: np.ndarray
    node: int = 0

    @property
    def applied(self) -> np.ndarray:
        """Saturated torque, i.e. what acts on the joints once g(q) is added back."""
        return self.tau + self.gravity


@dataclass(frozen=True, eq=False)
class MpcSnapshot:
    """Whole solution published by the MPC; replaced, never mutated."""

    solution: DdpSolution
    t_solution: float
    dt: float

    @property
    def horizon(self) -> float:
        return self.solution.N * self.dt


def _feedforward(solution: DdpSolution, k: int, fraction: float, mode: FeedforwardMode) -> np.ndarray:
    if mode == "linear" and k + 1 < solution.N:
        return solution.us[k] + fraction * (solution.us[k + 1] - solution.us[k])
    return solution.us[k]


def feedback_command(
    solution: DdpSolution,
    k: int,
    state: JointState,
    model: RobotModel,
    gains: GainSet,
    feedforward: FeedforwardMode = "zoh",
    fraction: float = 0.0,
) -> np.ndarray:
    """Raw torque: feedforward u*_k plus joint and Cartesian feedback toward node k+1.

    The Cartesian velocity error compares J(q*_{k+1}) v*_{k+1} with J(q) v, each
    Jacobian taken at its own configuration.
    """
    if not 0 <= k < solution.N:
        raise IndexError(f"node {k} outside [0, {solution.N})")
    _check_dim(model, "q", state.q)
    _check_dim(model, "v", state.v)
    n = model.n_q
    q_ref, v_ref = solution.xs[k + 1, :n], solution.xs[k + 1, n:]
    u = _feedforward(solution, k, fraction, feedforward).copy()
    u += gains.K_d * (v_ref - state.v) + gains.K_p * (q_ref - state.q)

    if any(gains.K_pc) or any(gains.K_dc):
        pose, J = pose_and_jacobian(model, state.q)
        pose_ref, J_ref = pose_and_jacobian(model, q_ref)
        J_lin, J_ref_lin = J[:3], J_ref[:3]
        pos_err = pose_ref.p - pose.p
        vel_err = J_ref_lin @ v_ref - J_lin @ state.v
        force = np.asarray(gains.K_pc) * pos_err + np.asarray(gains.K_dc) * vel_err
        u += J_lin.T @ force
    return u


def saturate_and_compensate(raw: np.ndarray, model: RobotModel, q: np.ndarray) -> ControlCommand:
    """tau = clip(raw, u_min, u_max) - g(q): saturate first, then remove gravity."""
    raw = np.asarray(raw, dtype=float)
    _check_dim(model, "u", raw)
    clipped = np.clip(raw, model.u_min, model.u_max)
    g = gravity_vector(model, q)
    saturated = (raw > model.u_max) | (raw < model.u_min)
    return ControlCommand(tau=clipped - g, saturated=saturated, raw=raw, gravity=g)


def node_index(t: float, t_solution: float, dt: float) -> int:
    return int(np.floor((t - t_solution) / dt + _NODE_EPS))


def control_tick(
    t: float,
    snapshot: MpcSnapshot,
    state: JointState,
    model: RobotModel,
    gains: GainSet,
    feedforward: FeedforwardMode = "zoh",
) -> ControlCommand:
    age = t - snapshot.t_solution
    if age >= snapshot.horizon - _NODE_EPS * snapshot.dt:
        raise StaleSolutionError(age, snapshot.horizon)
    k = node_index(t, snapshot.t_solution, snapshot.dt)
    fraction = age / snapshot.dt - k
    raw = feedback_command(snapshot.solution, k, state, model, gains, feedforward, fraction)
    return replace(saturate_and_compensate(raw, model, state.q), node=k)
