"""Bayesian-optimization tuning loop over the 12-dimensional MPC parameter vector.

Phase 1 evaluates a Latin hypercube design. Phase 2 refits the surrogate on
every trial (SAAS mixture posterior or a vanilla point fit), maximizes
expected improvement and evaluates the proposal. All surrogate work happens in
the unit cube; the evaluator receives raw parameter values.
"""

from dataclasses import dataclass, field
import time
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from .config import PARAM_LABELS, tuner_config
from .gp import (
    KernelHyperparams,
    MixturePosterior,
    PosteriorSamples,
    TrialDataset,
    log_marginal_likelihood_and_grad,
    sample_hyperparams,
)
from .log import logger
from .sim import EpisodeConfig, EpisodeMetrics, baseline_metrics, evaluate_params
from .utils.core import ErrorCode, TunerException

Method = Literal["saasbo", "vanilla"]
Phase = Literal["init", "bo"]
Evaluator = Callable[[np.ndarray], tuple[float, EpisodeMetrics | None]]

# weights: two decades either side of the hand-tuned defaults; gains: [0.01, 100]
DEFAULT_LOWER = (1e3, 1e-6, 1e-4, 1e-5) + (0.01,) * 8
DEFAULT_UPPER = (1e7, 1e-2, 1.0, 1e-1) + (100.0,) * 8

VANILLA_RESTARTS = 5
_LOG_BOUND = 7.0  # |log lengthscale| and |log outputscale| box for the point fit


class ParamSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: tuple[float, ...] = Field(default=DEFAULT_LOWER)
    upper: tuple[float, ...] = Field(default=DEFAULT_UPPER)
    log: tuple[bool, ...] = Field(default=(True,) * len(PARAM_LABELS), description="log-scaled dimensions")
    labels: tuple[str, ...] = Field(default=PARAM_LABELS)

    @model_validator(mode="after")
    def _check(self) -> "ParamSpace":
        n = len(self.lower)
        if not (len(self.upper) == len(self.log) == len(self.labels) == n) or n == 0:
            raise ValueError("lower, upper, log and labels must have the same non-zero length")
        for label, lo, hi, is_log in zip(self.labels, self.lower, self.upper, self.log):
            if not lo < hi:
                raise ValueError(f"{label}: lower bound {lo} must be below upper bound {hi}")
            if is_log and lo <= 0:
                raise ValueError(f"{label}: log-scaled bounds must be positive")
        return self

    @classmethod
    def unit(cls, dim: int) -> "ParamSpace":
        return cls(
            lower=(0.0,) * dim,
            upper=(1.0,) * dim,
            log=(False,) * dim,
            labels=tuple(f"x{i}" for i in range(dim)),
        )

    @property
    def dim(self) -> int:
        return len(self.lower)

    def _transformed_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        is_log = np.array(self.log)
        lo = np.where(is_log, np.log(np.where(is_log, self.lower, 1.0)), self.lower)
        hi = np.where(is_log, np.log(np.where(is_log, self.upper, 1.0)), self.upper)
        return lo, hi, is_log

    def to_unit(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        lo, hi, is_log = self._transformed_bounds()
        t = np.where(is_log, np.log(np.where(is_log, np.maximum(theta, 1e-300), 1.0)), theta)
        return np.clip((t - lo) / (hi - lo), 0.0, 1.0)

    def from_unit(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        lo, hi, is_log = self._transformed_bounds()
        t = lo + u * (hi - lo)
        theta = np.where(is_log, np.exp(t), t)
        # exp(log(x)) can land one ulp outside the box
        return np.clip(theta, self.lower, self.upper)

    def violations(self, theta) -> list[str]:
        """Labels of dimensions outside the bounds."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dim:
            raise TunerException(
                f"theta has {theta.shape[0]} entries, expected {self.dim}", code=ErrorCode.DIMENSION_MISMATCH
            )
        return [
            f"{label}={value:g} not in [{lo:g}, {hi:g}]"
            for label, value, lo, hi in zip(self.labels, theta, self.lower, self.upper)
            if not lo <= value <= hi
        ]


class CampaignConfig(BaseModel):
    n_init: int = Field(default=tuner_config.N_INIT, ge=2, description="Latin hypercube trials")
    n_max: int = Field(default=tuner_config.N_MAX, description="total trial budget")
    patience: int = Field(default=tuner_config.PATIENCE, ge=1, description="BO trials without a new best")
    alpha: float = Field(default_factory=tuner_config.get_alpha, ge=0, le=1)
    seed: int = 0
    method: Method = "saasbo"
    raw_objective: bool = Field(default=False, description="skip the baseline normalization of J")
    nuts_warmup: int = Field(default=tuner_config.NUTS_WARMUP, ge=0)
    nuts_samples: int = Field(default=tuner_config.NUTS_SAMPLES, ge=1)
    nuts_thin: int = Field(default=tuner_config.NUTS_THIN, ge=1)
    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)

    @model_validator(mode="after")
    def _budget(self) -> "CampaignConfig":
        if self.n_max <= self.n_init:
            raise ValueError(f"n_max ({self.n_max}) must exceed n_init ({self.n_init})")
        if self.nuts_samples < self.nuts_thin:
            raise ValueError("nuts_samples must be at least nuts_thin")
        return self


class TrialRecord(BaseModel):
    index: int = Field(ge=0)
    theta: list[float]
    theta_unit: list[float]
    y: float
    metrics: EpisodeMetrics | None = None
    phase: Phase
    timestamp: float = Field(default_factory=time.time)

    @field_validator("y")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("objective value must be finite")
        return value


@dataclass
class CampaignResult:
    theta_best: np.ndarray
    y_best: float
    records: list[TrialRecord]
    samples: PosteriorSamples | None = None
    stopped_early: bool = False
    wall_time: float = 0.0
    labels: tuple[str, ...] = field(default=PARAM_LABELS)

    def best_trace(self) -> np.ndarray:
        return best_so_far([r.y for r in self.records])

    def phase_counts(self) -> dict[str, int]:
        return {p: sum(r.phase == p for r in self.records) for p in ("init", "bo")}


def best_so_far(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=float)) if len(values) else np.array([])


# --------------------------------------------------------------------------
# design and acquisition
# --------------------------------------------------------------------------


def latin_hypercube(space: ParamSpace, n: int, seed: int) -> np.ndarray:
    """(n, D) raw parameter vectors, stratified in the transformed (log or linear) axes."""
    if n < 1:
        raise TunerException("n must be >= 1", code=ErrorCode.INVALID_PARAMETER)
    unit = qmc.LatinHypercube(d=space.dim, seed=np.random.default_rng(seed)).random(n)
    return space.from_unit(unit)


def expected_improvement(mean, std, best):
    """EI for minimization: E[max(best - f, 0)], f ~ N(mean, std^2)."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise TunerException("posterior std must be >= 0", code=ErrorCode.INVALID_PARAMETER)
    gain = best - mean
    safe = np.where(std > 0, std, 1.0)
    z = gain / safe
    ei = np.where(std > 0, gain * norm.cdf(z) + std * norm.pdf(z), np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _coordinate_descent(score, starts: np.ndarray, sweeps: int, grid: int = 11) -> tuple[np.ndarray, np.ndarray]:
    """Batched per-coordinate grid refinement of all starts; step halves each sweep."""
    points = starts.copy()
    values = score(points)
    n_starts, dim = points.shape
    offsets = np.linspace(-1.0, 1.0, grid)
    for sweep in range(sweeps):
        radius = 0.25 / 2**sweep
        for d in range(dim):
            trial = np.repeat(points[:, None, :], grid, axis=1)
            trial[:, :, d] = np.clip(points[:, d, None] + radius * offsets, 0.0, 1.0)
            trial_values = score(trial.reshape(-1, dim)).reshape(n_starts, grid)
            best = np.argmax(trial_values, axis=1)
            improved = trial_values[np.arange(n_starts), best] > values
            points[improved] = trial[improved, best[improved]]
            values[improved] = trial_values[improved, best[improved]]
    return points, values


def maximize_acquisition(
    samples: PosteriorSamples,
    data: TrialDataset,
    space: ParamSpace,
    seed: int,
    raw_samples: int | None = None,
    restarts: int | None = None,
) -> np.ndarray:
    """Next point in the unit cube maximizing mixture-posterior EI."""
    if data.dim != space.dim:
        raise TunerException(
            f"dataset has {data.dim} dims, space has {space.dim}", code=ErrorCode.DIMENSION_MISMATCH
        )
    default_raw, default_restarts = tuner_config.get_acquisition_budget()
    raw_samples = raw_samples or default_raw
    restarts = restarts or default_restarts

    posterior = MixturePosterior(samples, data)
    best = float(np.min(data.y_std))

    def score(X: np.ndarray) -> np.ndarray:
        mean, var = posterior.predict(X)
        return np.atleast_1d(expected_improvement(mean, np.sqrt(var), best))

    candidates = qmc.Sobol(d=space.dim, scramble=True, seed=np.random.default_rng(seed)).random(raw_samples)
    values = score(candidates)
    top = np.argsort(-values, kind="stable")[:restarts]
    points, refined = _coordinate_descent(score, candidates[top], tuner_config.ACQ_SWEEPS)

    if np.max(refined) <= 0.0:
        _, var = posterior.predict(candidates)
        logger.warning("expected improvement is zero everywhere, taking the max-variance candidate", command="acquire")
        return candidates[int(np.argmax(var))]
    return np.clip(points[int(np.argmax(refined))], 0.0, 1.0)


# --------------------------------------------------------------------------
# vanilla surrogate
# --------------------------------------------------------------------------


def vanilla_neg_log_posterior(params: np.ndarray, data: TrialDataset) -> tuple[float, np.ndarray]:
    """-(log marginal likelihood + N(0, 1) priors on log lengthscales and log outputscale).

    ``params = [log lengthscale_1..D, log outputscale]``.
    """
    w, s = params[:-1], params[-1]
    rho = np.exp(-2.0 * w)
    lml, g_log_rho, g_log_out = log_marginal_likelihood_and_grad(data, rho, float(np.exp(s)))
    value = lml - 0.5 * np.sum(w**2) - 0.5 * s**2
    grad = np.concatenate([-2.0 * g_log_rho - w, [g_log_out - s]])
    return -float(value), -grad


def vanilla_fit(data: TrialDataset, seed: int = 0, restarts: int = VANILLA_RESTARTS) -> KernelHyperparams:
    """MAP point estimate with log-normal priors, multi-start L-BFGS-B."""
    data.require_fit()
    rng = np.random.default_rng(seed)
    starts = [np.zeros(data.dim + 1)] + [rng.normal(0.0, 1.0, data.dim + 1) for _ in range(restarts - 1)]
    bounds = [(-_LOG_BOUND, _LOG_BOUND)] * (data.dim + 1)
    best_x, best_f = None, np.inf
    for x0 in starts:
        try:
            res = minimize(vanilla_neg_log_posterior, x0, args=(data,), jac=True, method="L-BFGS-B", bounds=bounds)
        except TunerException as e:
            logger.debug(f"vanilla fit start failed: {e}", command="surrogate")
            continue
        if np.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    if best_x is None:
        logger.warning("vanilla GP fit failed on every start, using unit lengthscales", command="surrogate")
        return KernelHyperparams(1.0, np.ones(data.dim))
    return KernelHyperparams(float(np.exp(best_x[-1])), np.exp(best_x[:-1]))


# --------------------------------------------------------------------------
# campaign
# --------------------------------------------------------------------------


class EpisodeObjective:
    """Picklable theta -> (J, metrics) evaluator for worker processes."""

    def __init__(self, config: CampaignConfig, baseline: EpisodeMetrics | None = None):
        self.episode = config.episode
        self.alpha = config.alpha
        self.raw = config.raw_objective
        self.baseline = baseline if baseline is not None or self.raw else baseline_metrics(self.episode)

    def __call__(self, theta: np.ndarray) -> tuple[float, EpisodeMetrics]:
        return evaluate_params(theta, self.episode, self.alpha, self.baseline, self.raw)


class Campaign:
    """Loop state; the sync runner below and the async service both drive it."""

    def __init__(self, config: CampaignConfig, space: ParamSpace, records: list[TrialRecord] | None = None):
        self.config = config
        self.space = space
        self.records: list[TrialRecord] = []
        self.samples: PosteriorSamples | None = None
        self.stall = 0
        self.design = latin_hypercube(space, config.n_init, config.seed)
        for record in records or []:
            self._check_resumed(record)
            self._append(record)

    def _check_resumed(self, record: TrialRecord) -> None:
        if record.index != len(self.records):
            raise TunerException(
                f"journal trial {record.index} out of order, expected {len(self.records)}",
                code=ErrorCode.JOURNAL_CORRUPT,
            )
        if len(record.theta) != self.space.dim:
            raise TunerException("journal trial dimension mismatch", code=ErrorCode.JOURNAL_CORRUPT)

    @property
    def best_index(self) -> int | None:
        if not self.records:
            return None
        return int(np.argmin([r.y for r in self.records]))

    @property
    def y_best(self) -> float:
        idx = self.best_index
        return self.records[idx].y if idx is not None else np.inf

    def pending_init(self) -> list[tuple[int, np.ndarray]]:
        return [(i, self.design[i]) for i in range(len(self.records), self.config.n_init)]

    @property
    def done(self) -> bool:
        return len(self.records) >= self.config.n_max or self.stall > self.config.patience

    def _append(self, record: TrialRecord) -> None:
        previous = self.y_best
        self.records.append(record)
        if record.phase == "bo":
            improved = record.y < previous - tuner_config.PATIENCE_RTOL * abs(previous)
            self.stall = 0 if improved else self.stall + 1

    def record(self, index: int, theta: np.ndarray, y: float, metrics: EpisodeMetrics | None, phase: Phase) -> TrialRecord:
        previous = self.y_best
        record = TrialRecord(
            index=index,
            theta=[float(v) for v in theta],
            theta_unit=[float(v) for v in self.space.to_unit(theta)],
            y=y,
            metrics=metrics,
            phase=phase,
        )
        self._append(record)
        if y < previous:
            logger.info(f"trial {index} ({phase}): new best J={y:.5g}", command="tune")
        else:
            logger.debug(f"trial {index} ({phase}): J={y:.5g}", command="tune")
        return record

    def dataset(self) -> TrialDataset:
        X = np.array([r.theta_unit for r in self.records])
        return TrialDataset(X, [r.y for r in self.records])

    def propose(self) -> np.ndarray:
        """Refit the surrogate and return the next raw theta."""
        iteration = len(self.records)
        data = self.dataset()
        step_seed = self.config.seed * 100_003 + iteration
        if self.config.method == "saasbo":
            self.samples = sample_hyperparams(
                data,
                self.config.nuts_warmup,
                self.config.nuts_samples,
                self.config.nuts_thin,
                seed=step_seed,
            )
        else:
            hyper = vanilla_fit(data, seed=step_seed)
            self.samples = PosteriorSamples([hyper], np.array([np.nan]))
        u_next = maximize_acquisition(self.samples, data, self.space, seed=step_seed)
        return self.space.from_unit(u_next)

    def result(self, wall_time: float = 0.0) -> CampaignResult:
        idx = self.best_index
        if idx is None:
            raise TunerException("campaign has no trials", code=ErrorCode.EPISODE_FAILED)
        return CampaignResult(
            theta_best=np.array(self.records[idx].theta),
            y_best=self.records[idx].y,
            records=list(self.records),
            samples=self.samples,
            stopped_early=self.stall > self.config.patience,
            wall_time=wall_time,
            labels=self.space.labels,
        )


def run_campaign(
    config: CampaignConfig,
    space: ParamSpace | None = None,
    evaluate: Evaluator | None = None,
    records: list[TrialRecord] | None = None,
    on_trial: Callable[[TrialRecord], None] | None = None,
) -> CampaignResult:
    """Sequential campaign; returns theta* = argmin J over all trials."""
    space = space or ParamSpace()
    started = time.perf_counter()
    campaign = Campaign(config, space, records)
    evaluate = evaluate or EpisodeObjective(config)

    for index, theta in campaign.pending_init():
        y, metrics = evaluate(theta)
        record = campaign.record(index, theta, y, metrics, "init")
        if on_trial:
            on_trial(record)
    logger.info(
        f"initial design done, best J={campaign.y_best:.5g}; starting {config.method} phase",
        command="tune",
    )

    while not campaign.done:
        theta = campaign.propose()
        y, metrics = evaluate(theta)
        record = campaign.record(len(campaign.records), theta, y, metrics, "bo")
        if on_trial:
            on_trial(record)

    result = campaign.result(time.perf_counter() - started)
    if result.stopped_early:
        logger.info(f"no improvement for {config.patience} trials, stopping", command="tune")
    return result
