"""Closed-loop episodes on the twin and the tuning objective.

Time is simulated: an MPC solve is instantaneous in episode time and its
measured (or deterministic) duration is only compared against the MPC period.
"""

import csv
from functools import lru_cache
from pathlib import Path
import time

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import PARAM_LABELS, PRESETS, resolve_robot_path, tuner_config
from .controller import FeedforwardMode, GainSet, MpcSnapshot, control_tick
from .ddp import DdpSolution, DdpSolver, SolverConfig
from .dynamics import JointState, RobotModel, forward_kinematics, integrate, load_model
from .log import logger
from .ocp import CostWeights, OcpProblem, stage_costs
from .trajectory import (
    ReferenceSample,
    ShapeSpec,
    anchored_at,
    sample_reference,
    trajectory_to_ocp_references,
    with_orientation,
)
from .utils.core import (
    DimensionError,
    DivergenceError,
    ErrorCode,
    FactorizationError,
    StaleSolutionError,
    TunerException,
)

N_PARAMS = len(PARAM_LABELS)
UR_HOME = (0.0, -np.pi / 2, np.pi / 2, -np.pi / 2, -np.pi / 2, 0.0)
_RATIO_TOL = 1e-9


class EpisodeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    robot: str = Field(default="ur10e", description="bundled model name or model file path")
    shape: ShapeSpec = Field(default_factory=ShapeSpec)
    weights: CostWeights = Field(default_factory=CostWeights)
    gains: GainSet = Field(default_factory=GainSet)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    horizon: int = Field(default_factory=tuner_config.get_horizon_nodes, ge=1)
    ocp_dt: float = Field(default_factory=tuner_config.get_ocp_dt, gt=0)
    control_period: float = Field(default=tuner_config.CONTROL_PERIOD, gt=0)
    mpc_period: float = Field(default=tuner_config.MPC_PERIOD, gt=0)
    physics_substep: float = Field(default=tuner_config.PHYSICS_SUBSTEP, gt=0)
    q_init: tuple[float, ...] | None = Field(default=None, description="None: UR home pose, or zeros")
    duration: float | None = Field(default=None, ge=0, description="override of shape.duration, s")
    anchor_shape: bool = Field(
        default=True, description="translate a shape without an explicit center to start at the initial pose"
    )
    feedforward: FeedforwardMode = "zoh"
    warm_start: bool = Field(default=True, description="seed each solve with the shifted previous solution")
    deterministic_time: bool = False
    init_jitter: float = Field(default=0.0, ge=0, description="std of a seeded q_init perturbation, rad")
    seed: int = 0
    record_log: bool = False

    @model_validator(mode="after")
    def _periods(self) -> "EpisodeConfig":
        if self.control_period > self.mpc_period:
            raise ValueError("control_period must be <= mpc_period")
        if self.physics_substep > self.control_period:
            raise ValueError("physics_substep must be <= control_period")
        for small, large, what in (
            (self.control_period, self.mpc_period, "mpc_period / control_period"),
            (self.physics_substep, self.control_period, "control_period / physics_substep"),
        ):
            ratio = large / small
            if abs(ratio - round(ratio)) > _RATIO_TOL * ratio:
                raise ValueError(f"{what} must be an integer")
        return self

    @property
    def episode_duration(self) -> float:
        return self.shape.duration if self.duration is None else self.duration

    def with_params(self, weights: CostWeights, gains: GainSet) -> "EpisodeConfig":
        return self.model_copy(update={"weights": weights, "gains": gains})


class EpisodeMetrics(BaseModel):
    avg_error: float = 0.0
    max_error: float = 0.0
    std_error: float = 0.0
    axis_error: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accumulated_cost: float = 0.0
    mean_solve_time: float = 0.0
    mean_iterations: float = 0.0
    violations: int = 0
    n_ticks: int = 0
    n_solves: int = 0
    failed: bool = False
    failure_reason: str | None = None
    wall_time: float = 0.0
    log: list[list[float]] | None = Field(default=None, exclude=True)
    log_header: list[str] | None = Field(default=None, exclude=True)


@lru_cache(maxsize=8)
def load_robot(name_or_path: str) -> RobotModel:
    return load_model(resolve_robot_path(name_or_path))


def initial_configuration(config: EpisodeConfig, model: RobotModel) -> np.ndarray:
    if config.q_init is not None:
        q0 = np.asarray(config.q_init, dtype=float)
        if q0.shape != (model.n_q,):
            raise DimensionError("q_init", model.n_q, q0.shape)
    elif model.n_q == len(UR_HOME):
        q0 = np.array(UR_HOME)
    else:
        q0 = np.zeros(model.n_q)
    if config.init_jitter > 0:
        rng = np.random.default_rng(config.seed)
        q0 = q0 + rng.normal(0.0, config.init_jitter, model.n_q)
    return q0


def episode_shape(config: EpisodeConfig, model: RobotModel, q0: np.ndarray) -> ShapeSpec:
    """Shape anchored at the initial end-effector position unless it has a center; orientation held if unset."""
    pose = forward_kinematics(model, q0)
    shape = config.shape
    if config.anchor_shape and shape.center is None:
        shape = anchored_at(shape, pose.p)
    if shape.orientation_rpy is None:
        shape = with_orientation(shape, pose.R)
    return shape


def _log_header(n: int) -> list[str]:
    return (
        ["t"]
        + [f"q{i + 1}" for i in range(n)]
        + [f"v{i + 1}" for i in range(n)]
        + [f"tau{i + 1}" for i in range(n)]
        + ["p_x", "p_y", "p_z", "p_des_x", "p_des_y", "p_des_z", "err", "solve_time", "iters"]
    )


def run_episode(config: EpisodeConfig, model: RobotModel | None = None) -> EpisodeMetrics:
    started = time.perf_counter()
    model = model or load_robot(config.robot)
    q0 = initial_configuration(config, model)
    shape = episode_shape(config, model, q0)

    dt_ctrl = config.control_period
    n_ticks = int(round(config.episode_duration / dt_ctrl))
    ticks_per_solve = int(round(config.mpc_period / dt_ctrl))
    substeps = int(round(dt_ctrl / config.physics_substep))
    dt_phys = dt_ctrl / substeps
    shift = config.mpc_period / config.ocp_dt

    solver = DdpSolver(config.solver)
    state = JointState.of(q0, np.zeros(model.n_v))
    snapshot: MpcSnapshot | None = None
    solution: DdpSolution | None = None
    command = None
    solve_times: list[float] = []
    iterations: list[int] = []
    violations = 0
    failure: str | None = None

    xs, us, p_des, R_des, p_act = [], [], [], [], []
    rows: list[list[float]] = []

    for i in range(n_ticks):
        t = i * dt_ctrl
        try:
            if i % ticks_per_solve == 0:
                refs = trajectory_to_ocp_references(shape, t, config.horizon, config.ocp_dt)
                problem = OcpProblem.build(model, config.horizon, config.ocp_dt, refs, config.weights)
                solution = solver.solve(
                    problem, state.x, warm_start=solution if config.warm_start else None, shift=shift
                )
                solve_time = (
                    solution.iterations * tuner_config.ITERATION_COST_SECONDS
                    if config.deterministic_time
                    else solution.wall_time
                )
                solve_times.append(solve_time)
                iterations.append(solution.iterations)
                if solve_time > config.mpc_period:
                    violations += 1
                snapshot = MpcSnapshot(solution, t, config.ocp_dt)
            try:
                command = control_tick(t, snapshot, state, model, config.gains, config.feedforward)
            except StaleSolutionError as e:
                violations += 1
                logger.warning(e.message, command="episode")
                if command is None:
                    raise
            applied = command.applied
            ref = sample_reference(shape, min(t, shape.duration))
            pose = forward_kinematics(model, state.q)
            xs.append(state.x)
            us.append(applied)
            p_des.append(ref.p_des)
            R_des.append(ref.R_des)
            p_act.append(pose.p)
            if config.record_log:
                err = float(np.linalg.norm(pose.p - ref.p_des))
                rows.append(
                    [t, *state.q, *state.v, *command.tau, *pose.p, *ref.p_des, err,
                     solve_times[-1], float(iterations[-1])]
                )
            state = integrate(model, state, applied, dt_phys, substeps)
        except (DivergenceError, FactorizationError, StaleSolutionError) as e:
            failure = e.message
            logger.error(f"episode failed at t={t:.3f}s: {e.message}", command="episode")
            break

    metrics = _summarize(model, config, xs, us, p_des, R_des, p_act, solve_times, iterations)
    metrics.violations = violations
    metrics.failed = failure is not None
    metrics.failure_reason = failure
    metrics.wall_time = time.perf_counter() - started
    if config.record_log:
        metrics.log = rows
        metrics.log_header = _log_header(model.n_q)
    return metrics


def _summarize(model, config, xs, us, p_des, R_des, p_act, solve_times, iterations) -> EpisodeMetrics:
    if not xs:
        return EpisodeMetrics()
    p_des_arr = np.array(p_des)
    diff = np.array(p_act) - p_des_arr
    errors = np.linalg.norm(diff, axis=1)

    # running cost along the realized trajectory, one node per control tick
    zero = np.zeros(3)
    refs = [ReferenceSample(p, R, zero) for p, R in zip(p_des, R_des)]
    refs.append(refs[-1])
    realized = OcpProblem.build(model, len(xs), config.control_period, refs, config.weights)
    running = stage_costs(realized, np.arange(len(xs)), np.array(xs), np.array(us))

    return EpisodeMetrics(
        avg_error=float(np.mean(errors)),
        max_error=float(np.max(errors)),
        std_error=float(np.std(errors)),
        axis_error=tuple(float(a) for a in np.mean(np.abs(diff), axis=0)),
        accumulated_cost=float(config.control_period * np.sum(running)),
        mean_solve_time=float(np.mean(solve_times)) if solve_times else 0.0,
        mean_iterations=float(np.mean(iterations)) if iterations else 0.0,
        n_ticks=len(xs),
        n_solves=len(solve_times),
    )


# --------------------------------------------------------------------------
# parameters and objective
# --------------------------------------------------------------------------


def pack_params(weights: CostWeights, gains: GainSet) -> np.ndarray:
    return np.array(
        [weights.w_pos, weights.w_rot, weights.w_tau, weights.w_v, gains.K_p, gains.K_d, *gains.K_pc, *gains.K_dc],
        dtype=float,
    )


def unpack_params(theta, base_weights: CostWeights | None = None) -> tuple[CostWeights, GainSet]:
    """theta = [w_pos, w_rot, w_tau, w_v, K_p, K_d, K_pc(3), K_dc(3)]; limit weights come from ``base_weights``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (N_PARAMS,):
        raise DimensionError("theta", N_PARAMS, theta.shape)
    base = base_weights or CostWeights()
    values = [float(x) for x in theta]
    fields = base.model_dump(exclude={"w_pos_N"})
    fields.update(zip(("w_pos", "w_rot", "w_tau", "w_v"), values[:4]))
    weights = CostWeights(**fields)
    gains = GainSet(K_p=values[4], K_d=values[5], K_pc=tuple(values[6:9]), K_dc=tuple(values[9:12]))
    return weights, gains


def default_params() -> np.ndarray:
    return np.array(PRESETS["default"], dtype=float)


def objective(
    metrics: EpisodeMetrics,
    alpha: float,
    baseline: EpisodeMetrics | None,
    raw: bool = False,
    penalty_factor: float | None = None,
) -> float:
    """alpha * L / L_base + (1 - alpha) * t / t_base; failed episodes get a finite penalty."""
    if not 0.0 <= alpha <= 1.0:
        raise TunerException(f"alpha must be in [0, 1], got {alpha}", code=ErrorCode.INVALID_PARAMETER)
    if penalty_factor is None:
        penalty_factor = tuner_config.get_failure_penalty_factor()
    if raw or baseline is None:
        cost_scale = time_scale = 1.0
        base_j = (
            alpha * baseline.accumulated_cost + (1.0 - alpha) * baseline.mean_solve_time
            if baseline is not None
            else 1.0
        )
    else:
        cost_scale, time_scale = baseline.accumulated_cost, baseline.mean_solve_time
        for name, value in (("baseline cost", cost_scale), ("baseline solve time", time_scale)):
            if not np.isfinite(value) or value <= 0:
                raise TunerException(f"{name} must be finite and positive, got {value}", code=ErrorCode.INVALID_PARAMETER)
        base_j = 1.0
    if metrics.failed:
        return float(penalty_factor * base_j)
    values = (metrics.accumulated_cost, metrics.mean_solve_time)
    if not all(np.isfinite(v) for v in values):
        raise TunerException("episode metrics are not finite", code=ErrorCode.INVALID_PARAMETER)
    return float(alpha * values[0] / cost_scale + (1.0 - alpha) * values[1] / time_scale)


@lru_cache(maxsize=16)
def _baseline_for(config_json: str) -> EpisodeMetrics:
    config = EpisodeConfig.model_validate_json(config_json)
    logger.info("running baseline episode with default parameters", command="baseline")
    return run_episode(config)


def baseline_metrics(base: EpisodeConfig) -> EpisodeMetrics:
    """Default-parameter episode on ``base``, cached per configuration."""
    weights, gains = unpack_params(default_params(), base.weights)
    config = base.with_params(weights, gains).model_copy(update={"record_log": False})
    metrics = _baseline_for(config.model_dump_json())
    if metrics.failed:
        raise TunerException(
            f"baseline episode failed: {metrics.failure_reason}", code=ErrorCode.EPISODE_FAILED, recoverable=False
        )
    return metrics


def evaluate_params(
    theta,
    base: EpisodeConfig,
    alpha: float | None = None,
    baseline: EpisodeMetrics | None = None,
    raw: bool = False,
) -> tuple[float, EpisodeMetrics]:
    """Run one episode at theta and score it; episode failures become the penalty value."""
    alpha = tuner_config.get_alpha() if alpha is None else alpha
    weights, gains = unpack_params(theta, base.weights)
    if baseline is None and not raw:
        baseline = baseline_metrics(base)
    metrics = run_episode(base.with_params(weights, gains))
    J = objective(metrics, alpha, baseline, raw=raw)
    if metrics.failed:
        logger.warning(f"episode failed, penalty J={J:.3f}", command="evaluate")
    return J, metrics


def write_episode_csv(metrics: EpisodeMetrics, path: str | Path) -> Path:
    """Per-tick log as CSV; requires an episode run with ``record_log``."""
    if metrics.log is None or metrics.log_header is None:
        raise TunerException("episode was run without record_log", code=ErrorCode.INVALID_PARAMETER)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(metrics.log_header)
        for row in metrics.log:
            writer.writerow([repr(float(x)) for x in row])
    return path
