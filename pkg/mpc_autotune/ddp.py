"""Feasibility-driven DDP over an :class:`OcpProblem`.

Gaps are defined as ``g_0 = x0 - xs[0]`` and ``g_{k+1} = f(xs[k], us[k]) - xs[k+1]``.
The backward pass evaluates the value function of node k+1 at the end of the
gapped transition, the forward pass contracts every gap by ``(1 - step)``.
The expected change of the total cost along a step is the quadratic model
``step * d1 + 0.5 * step**2 * d2`` evaluated on the linearized rollout of the
new gains, gaps included.

Line-search acceptance is monotone (Armijo on the predicted reduction) once the
trajectory is dynamically feasible; while gaps remain open a cost increase is
tolerated up to ``1 / accept_ratio`` times the predicted increase. A solve
converges when the trajectory is feasible and the expected improvement
``sum(Q_u' Q_uu^-1 Q_u)`` is below ``tolerance``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
import time
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import kernels
from .config import tuner_config
from .dynamics import gravity_vector
from .log import logger
from .ocp import (
    DerivativeMethod,
    OcpProblem,
    discrete_dynamics,
    dynamics_derivatives,
    stage_derivatives,
    terminal_derivatives,
    total_cost,
)
from .utils.core import DimensionError, DivergenceError, ErrorCode, FactorizationError


class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_iterations: int = Field(default_factory=tuner_config.get_solver_max_iterations, ge=1)
    tolerance: float = Field(
        default_factory=tuner_config.get_solver_tolerance,
        gt=0,
        description="threshold on the expected improvement sum(Q_u' Q_uu^-1 Q_u)",
    )
    gap_tolerance: float = Field(default=tuner_config.SOLVER_GAP_TOLERANCE, gt=0)
    reg_init: float = Field(default=tuner_config.REG_MIN, ge=0)
    reg_min: float = Field(default=tuner_config.REG_MIN, gt=0)
    reg_max: float = Field(default=tuner_config.REG_MAX, gt=0)
    reg_factor: float = Field(default=tuner_config.REG_FACTOR, gt=1)
    line_search_steps: tuple[float, ...] = Field(
        default_factory=lambda: tuple(tuner_config.get_line_search_steps())
    )
    accept_ratio: float = Field(default=tuner_config.ACCEPT_RATIO, gt=0, lt=1)
    derivatives: DerivativeMethod = "fd"
    verbose: bool = False
    trace_path: Path | None = Field(default=None, description="JSON-lines iteration trace")

    @field_validator("line_search_steps")
    @classmethod
    def _steps(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value or any(not 0.0 < s <= 1.0 for s in value):
            raise ValueError("line-search steps must lie in (0, 1]")
        return tuple(sorted(value, reverse=True))


@dataclass(eq=False)
class DdpSolution:
    xs: np.ndarray  # (N+1, nx)
    us: np.ndarray  # (N, nu)
    k: np.ndarray  # (N, nu) feedforward
    K: np.ndarray  # (N, nu, nx) feedback
    converged: bool
    iterations: int
    expected_improvement: float
    wall_time: float
    cost: float = float("nan")
    reg: float = 0.0
    trace: list[dict] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.us.shape[0]


class BackwardResult(NamedTuple):
    k: np.ndarray
    K: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray
    d1: float
    d2: float
    stop: float


class ForwardResult(NamedTuple):
    xs: np.ndarray
    us: np.ndarray
    cost: np.ndarray | float


def _check_trajectory(problem: OcpProblem, xs: np.ndarray, us: np.ndarray) -> None:
    if xs.shape != (problem.N + 1, problem.nx):
        raise DimensionError("xs", (problem.N + 1, problem.nx), xs.shape)
    if us.shape != (problem.N, problem.nu):
        raise DimensionError("us", (problem.N, problem.nu), us.shape)


def compute_gaps(problem: OcpProblem, xs: np.ndarray, us: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Defects of the trajectory, shape (N+1, nx); row 0 is the initial-state defect."""
    gaps = np.zeros_like(xs)
    if x0 is not None:
        gaps[0] = np.asarray(x0, dtype=float) - xs[0]
    gaps[1:] = discrete_dynamics(problem, xs[:-1], us) - xs[1:]
    return gaps


def backward_pass(
    problem: OcpProblem,
    xs: np.ndarray,
    us: np.ndarray,
    reg: float,
    x0: np.ndarray | None = None,
    method: DerivativeMethod = "fd",
    gaps: np.ndarray | None = None,
) -> BackwardResult:
    """Riccati-like recursion over the Gauss-Newton model of the horizon.

    Raises :class:`FactorizationError` when ``Q_uu + reg I`` is not
    positive-definite at some node.
    """
    xs, us = np.asarray(xs, dtype=float), np.asarray(us, dtype=float)
    _check_trajectory(problem, xs, us)
    if gaps is None:
        gaps = compute_gaps(problem, xs, us, x0)
    gaps = np.ascontiguousarray(gaps, dtype=float)
    N, dt = problem.N, problem.dt

    f_x, f_u = dynamics_derivatives(problem, xs[:-1], us, method)
    stage = stage_derivatives(problem, np.arange(N), xs[:-1], us)
    l_x, l_u, l_xx, l_uu, l_ux = (np.ascontiguousarray(dt * block) for block in stage)
    lN_x, lN_xx = terminal_derivatives(problem, xs[N])

    k, K, Vx, Vxx, stop, failed = kernels.riccati(f_x, f_u, l_x, l_u, l_xx, l_uu, l_ux, lN_x, lN_xx, gaps, float(reg))
    if failed >= 0:
        raise FactorizationError(f"Q_uu not positive-definite at node {failed}", {"node": int(failed), "reg": reg})
    d1, d2 = kernels.expected_change(f_x, f_u, l_x, l_u, l_xx, l_uu, l_ux, lN_x, lN_xx, k, K, gaps)
    return BackwardResult(k, K, Vx, Vxx, float(d1), float(d2), float(stop))


def forward_pass(
    problem: OcpProblem,
    xs: np.ndarray,
    us: np.ndarray,
    gains: BackwardResult | tuple[np.ndarray, np.ndarray],
    step: float | np.ndarray,
    x0: np.ndarray | None = None,
    gaps: np.ndarray | None = None,
) -> ForwardResult:
    """Nonlinear rollout of u = us + step k + K (x - xs) with gaps contracted by (1 - step).

    ``step`` may be an array; the rollouts for all steps are then stacked
    along a leading axis. Rollouts that leave the finite range get an
    infinite cost.
    """
    xs, us = np.ascontiguousarray(xs, dtype=float), np.ascontiguousarray(us, dtype=float)
    _check_trajectory(problem, xs, us)
    k, K = (np.ascontiguousarray(g, dtype=float) for g in gains[:2])
    if gaps is None:
        gaps = compute_gaps(problem, xs, us, x0)
    gaps = np.ascontiguousarray(gaps, dtype=float)
    scalar = np.ndim(step) == 0
    alphas = np.atleast_1d(np.asarray(step, dtype=float))

    x_new = np.empty((len(alphas), problem.N + 1, problem.nx))
    u_new = np.empty((len(alphas), problem.N, problem.nu))
    cost = np.full(len(alphas), np.inf)
    for i, alpha in enumerate(alphas):
        x_new[i], u_new[i], alive = kernels.rollout(
            *problem.model.chain, xs, us, k, K, gaps, float(alpha), problem.dt
        )
        if alive:
            with np.errstate(all="ignore"):
                value = total_cost(problem, x_new[i], u_new[i])
            cost[i] = value if np.isfinite(value) else np.inf
    if scalar:
        return ForwardResult(x_new[0], u_new[0], float(cost[0]))
    return ForwardResult(x_new, u_new, cost)


def _interpolate_nodes(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rows of ``values`` at fractional node positions, held at the last row past the end."""
    last = len(values) - 1
    positions = np.clip(positions, 0.0, last)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, last)
    frac = (positions - lo)[:, None]
    return values[lo] + frac * (values[hi] - values[lo])


def shift_solution(previous: DdpSolution, x0: np.ndarray, shift: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Previous solution advanced by ``shift`` nodes, xs[0] set to ``x0``.

    Fractional shifts interpolate linearly between nodes; nodes shifted past
    the end repeat the last node.
    """
    if shift < 0:
        raise ValueError(f"shift must be >= 0, got {shift}")
    xs = _interpolate_nodes(previous.xs, np.arange(previous.N + 1) + shift)
    us = _interpolate_nodes(previous.us, np.arange(previous.N) + shift)
    xs[0] = x0
    return xs, us


def cold_start(problem: OcpProblem, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Constant state with gravity-holding torques."""
    x0 = np.asarray(x0, dtype=float)
    xs = np.tile(x0, (problem.N + 1, 1))
    u_hold = gravity_vector(problem.model, x0[: problem.model.n_q])
    us = np.tile(u_hold, (problem.N, 1))
    return xs, us


class DdpSolver:
    """Single-problem-at-a-time FDDP solver; reusable across MPC cycles."""

    def __init__(self, config: SolverConfig | None = None):
        self.config = config or SolverConfig()

    def _emit(self, trace: list[dict], entry: dict) -> None:
        trace.append(entry)
        if self.config.verbose:
            logger.debug(
                f"iter {entry['iteration']} cost={entry['cost']:.6e} reg={entry['reg']:.1e} "
                f"step={entry['step']} stop={entry['stop']:.3e}",
                command="ddp",
            )
        if self.config.trace_path is not None:
            with Path(self.config.trace_path).open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")

    def _accept(self, dV: float, expected: float, feasible: bool) -> bool:
        ratio = self.config.accept_ratio
        if not np.isfinite(dV):
            return False
        if feasible:
            return dV >= 0.0 and dV >= ratio * expected
        if expected >= 0.0:
            return dV >= ratio * expected
        return dV >= expected / ratio

    def _backward(self, problem, xs, us, reg, gaps, trace):
        cfg = self.config
        while True:
            try:
                return backward_pass(problem, xs, us, reg, method=cfg.derivatives, gaps=gaps), reg
            except FactorizationError as e:
                reg = max(reg * cfg.reg_factor, cfg.reg_min)
                if reg > cfg.reg_max:
                    raise DivergenceError(
                        f"regularization exhausted: {e.message}",
                        trace=trace,
                        code=ErrorCode.SOLVER_REGULARIZATION_EXHAUSTED,
                    ) from e

    def solve(
        self,
        problem: OcpProblem,
        initial_state: np.ndarray,
        warm_start: DdpSolution | None = None,
        shift: float = 1.0,
    ) -> DdpSolution:
        """Solve from ``initial_state``; a warm start is advanced by ``shift`` nodes first."""
        cfg = self.config
        started = time.perf_counter()
        x0 = np.asarray(initial_state, dtype=float)
        if x0.shape != (problem.nx,):
            raise DimensionError("initial_state", problem.nx, x0.shape)
        if not np.all(np.isfinite(x0)):
            raise DivergenceError("initial state is not finite", code=ErrorCode.NON_FINITE_STATE)

        if warm_start is not None and warm_start.xs.shape == (problem.N + 1, problem.nx):
            xs, us = shift_solution(warm_start, x0, shift)
        else:
            xs, us = cold_start(problem, x0)
        reg = cfg.reg_init

        trace: list[dict] = []
        cost = total_cost(problem, xs, us)
        if not np.isfinite(cost):
            raise DivergenceError("initial guess has a non-finite cost", trace=trace)
        iterations = 0
        converged = False
        gaps = compute_gaps(problem, xs, us, x0)

        while True:
            gap_norm = float(np.max(np.abs(gaps)))
            result, reg = self._backward(problem, xs, us, reg, gaps, trace)
            feasible = gap_norm < cfg.gap_tolerance
            if feasible and result.stop < cfg.tolerance:
                converged = True
                break
            if iterations >= cfg.max_iterations:
                break

            accepted = None
            for alpha in cfg.line_search_steps:
                candidate = forward_pass(problem, xs, us, result, alpha, gaps=gaps)
                expected = -(alpha * result.d1 + 0.5 * alpha**2 * result.d2)
                if self._accept(cost - candidate.cost, expected, feasible):
                    accepted = alpha, candidate
                    break
            iterations += 1

            if accepted is None:
                self._emit(trace, {"iteration": iterations, "cost": cost, "reg": reg, "step": 0.0, "stop": result.stop})
                reg = max(reg * cfg.reg_factor, cfg.reg_min)
                if reg > cfg.reg_max:
                    break
                continue

            alpha, candidate = accepted
            xs, us, cost = candidate.xs, candidate.us, float(candidate.cost)
            # the rollout closes every gap by the accepted step
            gaps = (1.0 - alpha) * gaps
            if alpha > 0.5:
                reg = reg / cfg.reg_factor if reg / cfg.reg_factor >= cfg.reg_min else 0.0
            elif alpha < 0.01:
                reg = max(reg * cfg.reg_factor, cfg.reg_min)
            self._emit(trace, {"iteration": iterations, "cost": cost, "reg": reg, "step": alpha, "stop": result.stop})
            if not np.isfinite(cost):
                raise DivergenceError("cost became non-finite", trace=trace)

        return DdpSolution(
            xs=xs,
            us=us,
            k=result.k,
            K=result.K,
            converged=converged,
            iterations=iterations,
            expected_improvement=float(result.stop),
            wall_time=time.perf_counter() - started,
            cost=float(cost),
            reg=reg,
            trace=trace,
        )


def solve(
    problem: OcpProblem,
    initial_state: np.ndarray,
    warm_start: DdpSolution | None = None,
    config: SolverConfig | None = None,
    shift: float = 1.0,
) -> DdpSolution:
    return DdpSolver(config).solve(problem, initial_state, warm_start, shift)
