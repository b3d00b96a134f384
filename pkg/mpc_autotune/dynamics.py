"""Rigid-body digital twin of a fixed-base serial manipulator.

All quantities are expressed in the world (base) frame. Every array function
accepts leading batch dimensions on ``q``/``v``/``a``/``u``; batches run through
vectorized numpy recursions, single configurations through the compiled
kernels of :mod:`mpc_autotune.kernels`.

Integration is semi-implicit Euler: ``v+ = v + a dt`` then ``q+ = q + v+ dt``.
No friction, backlash or delay is modelled.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .config import yaml_line_of, read_yaml, validate_model
from .log import logger
from .utils.core import (
    DimensionError,
    DivergenceError,
    ErrorCode,
    FactorizationError,
    ModelFileError,
)

MODEL_FORMAT = "mpc-autotune-robot/1"
_EYE3 = np.eye(3)


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading dimensions."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def rpy_to_matrix(rpy: np.ndarray) -> np.ndarray:
    """URDF convention: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def axis_rotation(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis for a batch of angles."""
    k = skew(axis)
    angle = np.asarray(angle, dtype=float)[..., None, None]
    return _EYE3 + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


# --------------------------------------------------------------------------
# model description
# --------------------------------------------------------------------------


class LinkSpec(BaseModel):
    mass: float = Field(gt=0, description="link mass, kg")
    com: list[float] = Field(min_length=3, max_length=3, description="COM in the joint frame, m")
    inertia: list[float] = Field(
        min_length=6, max_length=6, description="[ixx, ixy, ixz, iyy, iyz, izz] about the COM, kg m^2"
    )

    def inertia_matrix(self) -> np.ndarray:
        ixx, ixy, ixz, iyy, iyz, izz = self.inertia
        return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])

    @field_validator("inertia")
    @classmethod
    def _psd(cls, value: list[float]) -> list[float]:
        ixx, ixy, ixz, iyy, iyz, izz = value
        eig = np.linalg.eigvalsh(np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]]))
        if eig.min() < 0.0:
            raise ValueError("rotational inertia must be positive semi-definite")
        return value


class LimitSpec(BaseModel):
    q: tuple[float, float] = Field(description="position limits, rad")
    v: tuple[float, float] = Field(description="velocity limits, rad/s")
    u: tuple[float, float] = Field(description="torque limits, N m")

    @model_validator(mode="after")
    def _ordered(self) -> "LimitSpec":
        for name in ("q", "v", "u"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} limits must satisfy min < max")
        return self


class FrameSpec(BaseModel):
    xyz: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    rpy: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)


class JointSpec(BaseModel):
    name: str
    axis: list[float] = Field(min_length=3, max_length=3)
    origin: FrameSpec = Field(default_factory=FrameSpec, description="parent link frame to joint frame")
    link: LinkSpec
    limits: LimitSpec

    @field_validator("axis")
    @classmethod
    def _unit(cls, value: list[float]) -> list[float]:
        norm = float(np.linalg.norm(value))
        if norm < 1e-12:
            raise ValueError("joint axis must be non-zero")
        return [float(x) / norm for x in value]


class RobotSpec(BaseModel):
    """Schema of a robot model file."""

    format: str = MODEL_FORMAT
    name: str = "robot"
    gravity: list[float] = Field(default_factory=lambda: [0.0, 0.0, -9.81], min_length=3, max_length=3)
    joints: list[JointSpec] = Field(min_length=1)
    end_effector: FrameSpec = Field(default_factory=FrameSpec)
    approximate: bool = False


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Numerical form of a serial chain, immutable once built."""

    name: str
    axes: np.ndarray
    origin_rot: np.ndarray
    origin_pos: np.ndarray
    masses: np.ndarray
    coms: np.ndarray
    inertias: np.ndarray
    ee_rot: np.ndarray
    ee_pos: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    joint_names: tuple[str, ...] = ()

    @property
    def n_q(self) -> int:
        return int(self.axes.shape[0])

    @property
    def n_v(self) -> int:
        return self.n_q

    @property
    def n_u(self) -> int:
        return self.n_q

    @property
    def nx(self) -> int:
        return 2 * self.n_q

    @property
    def x_min(self) -> np.ndarray:
        return np.concatenate([self.q_min, self.v_min])

    @property
    def x_max(self) -> np.ndarray:
        return np.concatenate([self.q_max, self.v_max])

    @cached_property
    def chain(self) -> tuple[np.ndarray, ...]:
        """Contiguous float arrays in the order the compiled kernels take them."""
        arrays = (
            self.axes,
            self.origin_rot,
            self.origin_pos,
            self.masses,
            self.coms,
            self.inertias,
            self.ee_rot,
            self.ee_pos,
            self.gravity,
        )
        return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)

    def with_gravity(self, gravity) -> "RobotModel":
        return replace(self, gravity=np.asarray(gravity, dtype=float))


def build_model(spec: RobotSpec) -> RobotModel:
    joints = spec.joints
    return RobotModel(
        name=spec.name,
        axes=np.array([j.axis for j in joints], dtype=float),
        origin_rot=np.array([rpy_to_matrix(np.array(j.origin.rpy)) for j in joints]),
        origin_pos=np.array([j.origin.xyz for j in joints], dtype=float),
        masses=np.array([j.link.mass for j in joints], dtype=float),
        coms=np.array([j.link.com for j in joints], dtype=float),
        inertias=np.array([j.link.inertia_matrix() for j in joints]),
        ee_rot=rpy_to_matrix(np.array(spec.end_effector.rpy)),
        ee_pos=np.array(spec.end_effector.xyz, dtype=float),
        q_min=np.array([j.limits.q[0] for j in joints]),
        q_max=np.array([j.limits.q[1] for j in joints]),
        v_min=np.array([j.limits.v[0] for j in joints]),
        v_max=np.array([j.limits.v[1] for j in joints]),
        u_min=np.array([j.limits.u[0] for j in joints]),
        u_max=np.array([j.limits.u[1] for j in joints]),
        gravity=np.array(spec.gravity, dtype=float),
        joint_names=tuple(j.name for j in joints),
    )


def load_model(path: str | Path) -> RobotModel:
    """Load and validate a robot model file; errors carry the file line."""
    data, node = read_yaml(path, code=ErrorCode.MODEL_FILE_INVALID)
    if not isinstance(data, dict):
        raise ModelFileError("top level must be a mapping", str(path), 1)
    version = data.get("format")
    if version != MODEL_FORMAT:
        raise ModelFileError(
            f"unsupported format header {version!r}, expected {MODEL_FORMAT!r}",
            str(path),
            1,
            code=ErrorCode.MODEL_VERSION_UNSUPPORTED,
        )
    spec = validate_model(RobotSpec, data, node, path, error_cls=ModelFileError)
    # files must carry strictly positive-definite inertias
    for i, joint in enumerate(spec.joints):
        if np.linalg.eigvalsh(joint.link.inertia_matrix()).min() <= 0.0:
            line = yaml_line_of(node, ("joints", i, "link", "inertia"))
            raise ModelFileError(f"joints.{i}.link.inertia: must be positive-definite", str(path), line)
    model = build_model(spec)
    logger.debug(f"Loaded robot model '{model.name}' with {model.n_q} joints from {path}", command="model")
    if spec.approximate:
        logger.debug(f"Model '{model.name}' uses approximate public parameters", command="model")
    return model


# --------------------------------------------------------------------------
# state and pose
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JointState:
    q: np.ndarray
    v: np.ndarray

    @classmethod
    def of(cls, q, v) -> "JointState":
        return cls(np.asarray(q, dtype=float).copy(), np.asarray(v, dtype=float).copy())

    @classmethod
    def from_x(cls, x: np.ndarray) -> "JointState":
        n = x.shape[-1] // 2
        return cls(x[..., :n].copy(), x[..., n:].copy())

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.v], axis=-1)

    def check(self, model: RobotModel) -> "JointState":
        _check_dim(model, "q", self.q)
        _check_dim(model, "v", self.v)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise DivergenceError("joint state is not finite", code=ErrorCode.NON_FINITE_STATE)
        return self


@dataclass(frozen=True, eq=False)
class EePose:
    p: np.ndarray
    R: np.ndarray


def _check_dim(model: RobotModel, what: str, arr: np.ndarray) -> None:
    if np.ndim(arr) == 0 or np.shape(arr)[-1] != model.n_q:
        raise DimensionError(what, model.n_q, np.shape(arr))


def _vec(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


class Kinematics(NamedTuple):
    rot: np.ndarray  # (..., n, 3, 3) link frames
    origin: np.ndarray  # (..., n, 3) joint origins
    axis: np.ndarray  # (..., n, 3) joint axes
    com: np.ndarray  # (..., n, 3) link centers of mass
    ee_pos: np.ndarray  # (..., 3)
    ee_rot: np.ndarray  # (..., 3, 3)


def kinematics(model: RobotModel, q: np.ndarray) -> Kinematics:
    q = np.asarray(q, dtype=float)
    _check_dim(model, "q", q)
    batch = q.shape[:-1]
    rot_prev = np.broadcast_to(_EYE3, batch + (3, 3))
    pos_prev = np.zeros(batch + (3,))
    rots, origins, axes, coms = [], [], [], []
    for i in range(model.n_q):
        joint_rot = rot_prev @ model.origin_rot[i]
        origin = pos_prev + np.einsum("...ij,j->...i", rot_prev, model.origin_pos[i])
        axes.append(np.einsum("...ij,j->...i", joint_rot, model.axes[i]))
        link_rot = joint_rot @ axis_rotation(model.axes[i], q[..., i])
        rots.append(link_rot)
        origins.append(origin)
        coms.append(origin + np.einsum("...ij,j->...i", link_rot, model.coms[i]))
        rot_prev, pos_prev = link_rot, origin
    ee_pos = pos_prev + np.einsum("...ij,j->...i", rot_prev, model.ee_pos)
    ee_rot = rot_prev @ model.ee_rot
    return Kinematics(
        np.stack(rots, axis=-3),
        np.stack(origins, axis=-2),
        np.stack(axes, axis=-2),
        np.stack(coms, axis=-2),
        ee_pos,
        ee_rot,
    )


def forward_kinematics(model: RobotModel, q: np.ndarray) -> EePose:
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        _check_dim(model, "q", q)
        p, R, _ = kernels.ee_kinematics(*model.chain, _vec(q))
        return EePose(p, R)
    kin = kinematics(model, q)
    return EePose(kin.ee_pos, kin.ee_rot)


def _jacobian_from(kin: Kinematics) -> np.ndarray:
    lever = kin.ee_pos[..., None, :] - kin.origin
    linear = np.cross(kin.axis, lever)
    return np.concatenate([np.swapaxes(linear, -1, -2), np.swapaxes(kin.axis, -1, -2)], axis=-2)


def frame_jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """6 x n end-effector Jacobian in the world frame, linear rows first."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        return pose_and_jacobian(model, q)[1]
    return _jacobian_from(kinematics(model, q))


def pose_and_jacobian(model: RobotModel, q: np.ndarray) -> tuple[EePose, np.ndarray]:
    """End-effector pose and Jacobian of one configuration in a single pass."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise DimensionError("q", model.n_q, q.shape)
    _check_dim(model, "q", q)
    p, R, J = kernels.ee_kinematics(*model.chain, _vec(q))
    return EePose(p, R), J


def _world_inertias(model: RobotModel, kin: Kinematics) -> np.ndarray:
    return kin.rot @ model.inertias @ np.swapaxes(kin.rot, -1, -2)


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia by composite-rigid-body accumulation.

    Spatial quantities are taken about the world origin (angular part first),
    so the composite inertia of the subtree at joint j is a suffix sum and
    M[i, j] = S_i^T Ic_j S_j for i <= j.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        _check_dim(model, "q", q)
        return kernels.mass_matrix(*model.chain, _vec(q))
    kin = kinematics(model, q)
    n = model.n_q
    m = model.masses[:, None, None]
    c_hat = skew(kin.com)
    inertia = _world_inertias(model, kin)
    spatial = np.zeros(kin.com.shape[:-1] + (6, 6))
    spatial[..., :3, :3] = inertia - m * (c_hat @ c_hat)
    spatial[..., :3, 3:] = m * c_hat
    spatial[..., 3:, :3] = -m * c_hat
    spatial[..., 3:, 3:] = m * _EYE3
    composite = np.flip(np.cumsum(np.flip(spatial, axis=-3), axis=-3), axis=-3)
    motion = np.concatenate([kin.axis, np.cross(kin.origin, kin.axis)], axis=-1)
    force = np.einsum("...jab,...jb->...ja", composite, motion)
    upper = np.einsum("...ia,...ja->...ij", motion, force)
    idx = np.arange(n)
    mask = idx[:, None] <= idx[None, :]
    M = np.where(mask, upper, np.swapaxes(upper, -1, -2))
    return M


def inverse_dynamics(
    model: RobotModel,
    q: np.ndarray,
    v: np.ndarray,
    a: np.ndarray,
    gravity: np.ndarray | None = None,
) -> np.ndarray:
    """Recursive Newton-Euler: torques that realise accelerations ``a``."""
    q, v, a = (np.asarray(x, dtype=float) for x in (q, v, a))
    for what, arr in (("q", q), ("v", v), ("a", a)):
        _check_dim(model, what, arr)
    q, v, a = np.broadcast_arrays(q, v, a)
    g = model.gravity if gravity is None else np.asarray(gravity, dtype=float)
    if q.ndim == 1:
        return kernels.inverse_dynamics(*model.chain[:-1], _vec(g), _vec(q), _vec(v), _vec(a))
    kin = kinematics(model, q)
    inertia = _world_inertias(model, kin)
    batch = q.shape[:-1]
    omega = np.zeros(batch + (3,))
    domega = np.zeros(batch + (3,))
    acc = np.broadcast_to(-g, batch + (3,)).copy()
    prev_origin = np.zeros(batch + (3,))
    forces, moments = [], []
    for i in range(model.n_q):
        z = kin.axis[..., i, :]
        origin = kin.origin[..., i, :]
        r = origin - prev_origin
        acc = acc + np.cross(domega, r) + np.cross(omega, np.cross(omega, r))
        spin = z * v[..., i, None]
        domega = domega + z * a[..., i, None] + np.cross(omega, spin)
        omega = omega + spin
        offset = kin.com[..., i, :] - origin
        acc_com = acc + np.cross(domega, offset) + np.cross(omega, np.cross(omega, offset))
        inertia_i = inertia[..., i, :, :]
        forces.append(model.masses[i] * acc_com)
        moments.append(
            np.einsum("...ij,...j->...i", inertia_i, domega)
            + np.cross(omega, np.einsum("...ij,...j->...i", inertia_i, omega))
        )
        prev_origin = origin
    tau = np.zeros(batch + (model.n_q,))
    f_next = np.zeros(batch + (3,))
    n_next = np.zeros(batch + (3,))
    origin_next = np.zeros(batch + (3,))
    for i in reversed(range(model.n_q)):
        origin = kin.origin[..., i, :]
        offset = kin.com[..., i, :] - origin
        n_i = moments[i] + np.cross(offset, forces[i]) + n_next
        if i < model.n_q - 1:
            n_i = n_i + np.cross(origin_next - origin, f_next)
        f_next = forces[i] + f_next
        n_next = n_i
        origin_next = origin
        tau[..., i] = np.einsum("...i,...i->...", kin.axis[..., i, :], n_i)
    return tau


def bias_forces(model: RobotModel, state: JointState) -> np.ndarray:
    """C(q, v) v + g(q)."""
    return inverse_dynamics(model, state.q, state.v, np.zeros_like(np.asarray(state.q, dtype=float)))


def gravity_vector(model: RobotModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    zeros = np.zeros_like(q)
    return inverse_dynamics(model, q, zeros, zeros)


def spd_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve M x = rhs for symmetric positive-definite M (batched)."""
    if M.ndim == 2:
        try:
            factor = cho_factor(M, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise FactorizationError("mass matrix is not positive-definite", {"error": str(e)}) from e
        return cho_solve(factor, rhs)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as e:
        raise FactorizationError("mass matrix is not positive-definite", {"error": str(e)}) from e
    y = np.linalg.solve(L, rhs[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def forward_dynamics(model: RobotModel, state: JointState, u: np.ndarray) -> np.ndarray:
    """a = M(q)^-1 (u - b(q, v))."""
    u = np.asarray(u, dtype=float)
    _check_dim(model, "u", u)
    q, v = np.asarray(state.q, dtype=float), np.asarray(state.v, dtype=float)
    if q.ndim == v.ndim == u.ndim == 1:
        _check_dim(model, "q", q)
        _check_dim(model, "v", v)
        a, ok = kernels.forward_dynamics(*model.chain, _vec(q), _vec(v), _vec(u))
        if not ok:
            raise FactorizationError("mass matrix is not positive-definite")
        return a
    M = mass_matrix(model, q)
    return spd_solve(M, u - bias_forces(model, state))


def step_arrays(model: RobotModel, q: np.ndarray, v: np.ndarray, u: np.ndarray, dt: float):
    """Batched semi-implicit Euler step on raw arrays."""
    a = forward_dynamics(model, JointState(q, v), u)
    v_next = v + a * dt
    return q + v_next * dt, v_next


def integrate(model: RobotModel, state: JointState, u: np.ndarray, dt: float, substeps: int = 1) -> JointState:
    """``substeps`` semi-implicit Euler steps of ``dt`` under a constant torque ``u``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    u = np.asarray(u, dtype=float)
    for what, arr in (("q", state.q), ("v", state.v), ("u", u)):
        _check_dim(model, what, arr)
        if np.ndim(arr) != 1:
            raise DimensionError(what, model.n_q, np.shape(arr))
    q, v, ok = kernels.integrate(*model.chain, _vec(state.q), _vec(state.v), _vec(u), float(dt), int(substeps))
    if not ok:
        raise FactorizationError("mass matrix is not positive-definite")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
        raise DivergenceError("integration produced a non-finite state", code=ErrorCode.NON_FINITE_STATE)
    return JointState(q, v)


def step(model: RobotModel, state: JointState, u: np.ndarray, dt: float) -> JointState:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.ndim(state.q) == np.ndim(state.v) == np.ndim(u) == 1:
        return integrate(model, state, u, dt)
    q_next, v_next = step_arrays(model, state.q, state.v, u, dt)
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(v_next))):
        raise DivergenceError("integration produced a non-finite state", code=ErrorCode.NON_FINITE_STATE)
    return JointState(q_next, v_next)


def kinetic_energy(model: RobotModel, state: JointState) -> float:
    M = mass_matrix(model, state.q)
    return 0.5 * float(state.v @ M @ state.v)


def potential_energy(model: RobotModel, q: np.ndarray) -> float:
    kin = kinematics(model, q)
    return -float(np.sum(model.masses * (kin.com @ model.gravity)))
