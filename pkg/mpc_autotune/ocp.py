"""Discretized tracking OCP: costs, limit barriers and their derivatives.

State ordering is ``x = [q; v]``. The running cost ``l_k`` is returned
unscaled; the horizon objective is ``dt * sum(l_k) + l_N``. Hessians of the
tracking terms are Gauss-Newton (residual Jacobian outer products), the
regularizers and barriers are exact quadratics.
"""

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field

from . import kernels
from .dynamics import RobotModel, _jacobian_from, kinematics, skew
from .trajectory import ReferenceSample
from .utils.core import DimensionError, FactorizationError

DerivativeMethod = Literal["fd", "rnea"]
FD_STEP = 1e-6


class CostWeights(BaseModel):
    """Running/terminal weights; the terminal position weight follows w_pos."""

    model_config = ConfigDict(frozen=True)

    w_pos: float = Field(default=1e5, ge=0)
    w_rot: float = Field(default=1e-4, ge=0)
    w_tau: float = Field(default=1e-2, ge=0)
    w_v: float = Field(default=1e-3, ge=0)
    w_lim_tau: float = Field(default=1e1, ge=0)
    w_lim_x: float = Field(default=1e1, ge=0)
    barrier_margin: float = Field(default=0.0, ge=0)

    @computed_field
    @property
    def w_pos_N(self) -> float:
        return self.w_pos


@dataclass(frozen=True, eq=False)
class OcpProblem:
    model: RobotModel
    N: int
    dt: float
    references: tuple[ReferenceSample, ...]
    weights: CostWeights

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if len(self.references) != self.N + 1:
            raise DimensionError("references", self.N + 1, len(self.references))
        object.__setattr__(self, "p_des", np.array([r.p_des for r in self.references]))
        object.__setattr__(self, "R_des", np.array([r.R_des for r in self.references]))

    @classmethod
    def build(cls, model, N, dt, references, weights) -> "OcpProblem":
        return cls(model, int(N), float(dt), tuple(references), weights)

    @property
    def nx(self) -> int:
        return self.model.nx

    @property
    def nu(self) -> int:
        return self.model.n_u


class CostDerivatives(NamedTuple):
    l_x: np.ndarray
    l_u: np.ndarray
    l_xx: np.ndarray
    l_uu: np.ndarray
    l_ux: np.ndarray


# --------------------------------------------------------------------------
# barrier
# --------------------------------------------------------------------------


def _barrier_parts(value, lower, upper, margin: float = 0.0):
    """Per-coordinate value, gradient and Hessian diagonal of the quadratic barrier."""
    value = np.asarray(value, dtype=float)
    above = np.maximum(0.0, value - (np.asarray(upper) - margin))
    below = np.maximum(0.0, (np.asarray(lower) + margin) - value)
    cost = above**2 + below**2
    grad = 2.0 * above - 2.0 * below
    hess = 2.0 * ((above > 0.0) | (below > 0.0)).astype(float)
    return cost, grad, hess


def barrier(value, lower, upper, margin: float = 0.0) -> float:
    """Sum of squared bound violations; zero inside the bounds, C1 everywhere."""
    cost, _, _ = _barrier_parts(value, lower, upper, margin)
    return float(np.sum(cost))


def barrier_gradient(value, lower, upper, margin: float = 0.0) -> np.ndarray:
    return _barrier_parts(value, lower, upper, margin)[1]


# --------------------------------------------------------------------------
# costs, batched over nodes
# --------------------------------------------------------------------------


def _split(problem: OcpProblem, xs: np.ndarray):
    n = problem.model.n_q
    if xs.shape[-1] != 2 * n:
        raise DimensionError("x", 2 * n, xs.shape)
    return xs[..., :n], xs[..., n:]


def stage_costs(problem: OcpProblem, ks: np.ndarray, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Unscaled running costs l_k for nodes ``ks``."""
    model, w = problem.model, problem.weights
    if us.shape[-1] != model.n_u:
        raise DimensionError("u", model.n_u, us.shape)
    q, v = _split(problem, xs)
    kin = kinematics(model, q)
    r_pos = kin.ee_pos - problem.p_des[ks]
    r_rot = kin.ee_rot - problem.R_des[ks]
    cost = w.w_pos * np.sum(r_pos**2, axis=-1)
    cost = cost + w.w_rot * np.sum(r_rot**2, axis=(-2, -1))
    cost = cost + w.w_tau * np.sum(us**2, axis=-1) + w.w_v * np.sum(v**2, axis=-1)
    cost_u, _, _ = _barrier_parts(us, model.u_min, model.u_max, w.barrier_margin)
    cost_x, _, _ = _barrier_parts(xs, model.x_min, model.x_max, w.barrier_margin)
    return cost + w.w_lim_tau * np.sum(cost_u, axis=-1) + w.w_lim_x * np.sum(cost_x, axis=-1)


def terminal_costs(problem: OcpProblem, xs: np.ndarray) -> np.ndarray:
    q, _ = _split(problem, xs)
    r_pos = kinematics(problem.model, q).ee_pos - problem.p_des[problem.N]
    return problem.weights.w_pos_N * np.sum(r_pos**2, axis=-1)


def running_cost(problem: OcpProblem, k: int, x: np.ndarray, u: np.ndarray) -> float:
    if not 0 <= k < problem.N:
        raise IndexError(f"node {k} outside [0, {problem.N})")
    return float(stage_costs(problem, np.array(k), np.asarray(x, float), np.asarray(u, float)))


def terminal_cost(problem: OcpProblem, x_N: np.ndarray) -> float:
    return float(terminal_costs(problem, np.asarray(x_N, float)))


def total_cost(problem: OcpProblem, xs: np.ndarray, us: np.ndarray):
    """dt * sum of running costs + terminal cost; leading batch axes are kept."""
    running = stage_costs(problem, np.arange(problem.N), xs[..., :-1, :], us)
    cost = problem.dt * np.sum(running, axis=-1) + terminal_costs(problem, xs[..., -1, :])
    return float(cost) if np.ndim(cost) == 0 else cost


def _tracking_terms(problem: OcpProblem, q: np.ndarray, ks: np.ndarray, w_pos: float, w_rot: float):
    """Gradient and Gauss-Newton Hessian in q of the pose tracking terms."""
    kin = kinematics(problem.model, q)
    J = _jacobian_from(kin)
    J_pos, J_rot = J[..., :3, :], J[..., 3:, :]
    r_pos = kin.ee_pos - problem.p_des[ks]
    grad = 2.0 * w_pos * np.einsum("...ai,...a->...i", J_pos, r_pos)
    hess = 2.0 * w_pos * np.einsum("...ai,...aj->...ij", J_pos, J_pos)
    if w_rot > 0.0:
        # dR/dq_i = [axis_i]x R
        dR = skew(np.swapaxes(J_rot, -1, -2)) @ kin.ee_rot[..., None, :, :]
        r_rot = kin.ee_rot - problem.R_des[ks]
        flat = dR.reshape(dR.shape[:-2] + (9,))
        grad = grad + 2.0 * w_rot * np.einsum("...ia,...a->...i", flat, r_rot.reshape(r_rot.shape[:-2] + (9,)))
        hess = hess + 2.0 * w_rot * np.einsum("...ia,...ja->...ij", flat, flat)
    return grad, hess


def stage_derivatives(problem: OcpProblem, ks: np.ndarray, xs: np.ndarray, us: np.ndarray) -> CostDerivatives:
    """Unscaled running-cost derivatives for a batch of nodes."""
    model, w = problem.model, problem.weights
    n = model.n_q
    q, v = _split(problem, xs)
    batch = xs.shape[:-1]
    grad_q, hess_q = _tracking_terms(problem, q, ks, w.w_pos, w.w_rot)
    _, bgrad_x, bhess_x = _barrier_parts(xs, model.x_min, model.x_max, w.barrier_margin)
    _, bgrad_u, bhess_u = _barrier_parts(us, model.u_min, model.u_max, w.barrier_margin)

    l_x = w.w_lim_x * bgrad_x
    l_x[..., :n] += grad_q
    l_x[..., n:] += 2.0 * w.w_v * v
    l_xx = np.zeros(batch + (2 * n, 2 * n))
    l_xx[..., :n, :n] = hess_q
    diag = w.w_lim_x * bhess_x
    diag[..., n:] += 2.0 * w.w_v
    l_xx += diag[..., None, :] * np.eye(2 * n)

    l_u = 2.0 * w.w_tau * us + w.w_lim_tau * bgrad_u
    l_uu = (2.0 * w.w_tau + w.w_lim_tau * bhess_u)[..., None, :] * np.eye(n)
    l_ux = np.zeros(batch + (n, 2 * n))
    return CostDerivatives(l_x, l_u, l_xx, l_uu, l_ux)


def terminal_derivatives(problem: OcpProblem, x_N: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = problem.model.n_q
    q, _ = _split(problem, x_N)
    grad_q, hess_q = _tracking_terms(problem, q, np.array(problem.N), problem.weights.w_pos_N, 0.0)
    l_x = np.zeros(2 * n)
    l_xx = np.zeros((2 * n, 2 * n))
    l_x[:n] = grad_q
    l_xx[:n, :n] = hess_q
    return l_x, l_xx


def cost_derivatives(problem: OcpProblem, k: int, x: np.ndarray, u: np.ndarray) -> CostDerivatives:
    if not 0 <= k < problem.N:
        raise IndexError(f"node {k} outside [0, {problem.N})")
    return stage_derivatives(problem, np.array(k), np.asarray(x, float), np.asarray(u, float))


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


def _flat(x: np.ndarray, batch: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(x, batch + x.shape[-1:]).reshape(-1, x.shape[-1]), dtype=np.float64)


def discrete_dynamics(problem: OcpProblem, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Semi-implicit Euler transition f(x, u) over one node interval, batched."""
    xs, us = np.asarray(xs, float), np.asarray(us, float)
    _split(problem, xs)
    if us.shape[-1] != problem.nu:
        raise DimensionError("u", problem.nu, us.shape)
    batch = np.broadcast_shapes(xs.shape[:-1], us.shape[:-1])
    out, ok = kernels.transition(*problem.model.chain, _flat(xs, batch), _flat(us, batch), problem.dt)
    if not np.all(ok):
        raise FactorizationError("mass matrix is not positive-definite")
    return out.reshape(batch + (problem.nx,))


def dynamics_derivatives(
    problem: OcpProblem,
    x: np.ndarray,
    u: np.ndarray,
    method: DerivativeMethod = "fd",
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians (f_x, f_u) of the semi-implicit Euler transition; batched.

    ``fd`` takes central differences of forward dynamics; ``rnea`` uses
    da/du = M^-1 and differences inverse dynamics at the realised acceleration.
    """
    x, u = np.asarray(x, float), np.asarray(u, float)
    _split(problem, x)
    if method == "fd":
        kernel = kernels.acceleration_jacobians_fd
    elif method == "rnea":
        kernel = kernels.acceleration_jacobians_rnea
    else:
        raise ValueError(f"unknown derivative method {method!r}")
    n, dt = problem.model.n_q, problem.dt
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    a_x, a_u, ok = kernel(*problem.model.chain, _flat(x, batch), _flat(u, batch), FD_STEP)
    if not np.all(ok):
        raise FactorizationError("mass matrix is not positive-definite")
    a_x = a_x.reshape(batch + (n, 2 * n))
    a_u = a_u.reshape(batch + (n, n))
    # v+ = v + a dt ; q+ = q + v+ dt
    dv_x = dt * a_x
    dv_x[..., :, n:] += np.eye(n)
    dq_x = dt * dv_x
    dq_x[..., :, :n] += np.eye(n)
    f_x = np.concatenate([dq_x, dv_x], axis=-2)
    f_u = np.concatenate([dt * dt * a_u, dt * a_u], axis=-2)
    return f_x, f_u
