import asyncio
from concurrent.futures import ProcessPoolExecutor
import csv
from datetime import datetime
from importlib import metadata
import json
from pathlib import Path
import time
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .bo import (
    Campaign,
    CampaignConfig,
    CampaignResult,
    EpisodeObjective,
    Method,
    ParamSpace,
    TrialRecord,
    best_so_far,
)
from .config import (
    CONFIGS_PATH,
    PRESETS,
    ROBOTS_PATH,
    read_yaml,
    resolve_robot_path,
    tuner_config,
    validate_model,
    yaml_line_of,
)
from .log import logger
from .sim import (
    EpisodeConfig,
    EpisodeMetrics,
    baseline_metrics,
    run_episode,
    unpack_params,
    write_episode_csv,
)
from .store import Store, read_journal
from .trajectory import ShapeKind
from .utils.core import ConfigError, ErrorCode, JournalError, TunerException

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def exit_code_for(exc: TunerException) -> int:
    return EXIT_CONFIG if exc.is_config_error else EXIT_RUNTIME


class RunConfig(BaseModel):
    """Schema of a run config file (YAML); see data/configs/hexagon.yaml."""

    episode: EpisodeConfig = Field(default_factory=EpisodeConfig)
    campaign: CampaignConfig = Field(default_factory=CampaignConfig)
    space: ParamSpace = Field(default_factory=ParamSpace)
    workers: int = Field(default_factory=tuner_config.get_workers, ge=1)
    output_dir: Path | None = None

    @model_validator(mode="after")
    def _share_episode(self) -> "RunConfig":
        self.campaign = self.campaign.model_copy(update={"episode": self.episode})
        return self

    def with_overrides(
        self,
        seed: int | None = None,
        method: Method | None = None,
        workers: int | None = None,
        deterministic_time: bool | None = None,
        shape: ShapeKind | None = None,
        output_dir: Path | None = None,
    ) -> "RunConfig":
        """Apply CLI flags; the result is re-validated."""
        data = self.model_dump(mode="json")
        if seed is not None:
            data["campaign"]["seed"] = seed
            data["episode"]["seed"] = seed
        if method is not None:
            data["campaign"]["method"] = method
        if workers is not None:
            data["workers"] = workers
        if deterministic_time is not None:
            data["episode"]["deterministic_time"] = deterministic_time
        if shape is not None:
            data["episode"]["shape"]["kind"] = shape
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        try:
            return RunConfig.model_validate(data)
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first["loc"])
            raise ConfigError(f"override {where}: {first['msg']}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a run config; errors carry the YAML line."""
    path = Path(path)
    data, node = read_yaml(path)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", str(path), 1)
    run = validate_model(RunConfig, data, node, path)

    robot = resolve_robot_path(run.episode.robot, path.parent)
    if not robot.exists():
        line = yaml_line_of(node, ("episode", "robot"))
        raise ConfigError(f"episode.robot: model file {robot} not found", str(path), line)
    if robot.parent != ROBOTS_PATH:
        run = run.model_copy(update={"episode": run.episode.model_copy(update={"robot": str(robot.resolve())})})
        run = RunConfig.model_validate(run.model_dump(mode="json"))
    return run


def load_run(path: Path | None) -> RunConfig:
    """The given config file, or the bundled hexagon campaign."""
    return load_run_config(path if path is not None else CONFIGS_PATH / "hexagon.yaml")


class RunManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: str
    config_path: str | None
    config: dict[str, Any]
    seed: int
    output_dir: str
    versions: dict[str, str]
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())

    @classmethod
    def build(cls, command: str, config_path: Path | None, run: RunConfig, out_dir: Path) -> "RunManifest":
        versions = {"mpc_autotune": __version__}
        for dist in ("numpy", "numba", "scipy", "pydantic"):
            try:
                versions[dist] = metadata.version(dist)
            except metadata.PackageNotFoundError:
                versions[dist] = "unknown"
        return cls(
            command=command,
            config_path=str(config_path) if config_path else None,
            config=run.model_dump(mode="json"),
            seed=run.campaign.seed,
            output_dir=str(out_dir),
            versions=versions,
        )


def resolve_output_dir(run: RunConfig, command: str) -> Path:
    if run.output_dir is not None:
        return run.output_dir
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return tuner_config.get_output_dir() / f"{command}-{stamp}"


def improvement(baseline: float, value: float) -> float:
    """Percent reduction relative to the baseline."""
    return 100.0 * (baseline - value) / baseline if baseline > 0 else 0.0


# --------------------------------------------------------------------------
# tune
# --------------------------------------------------------------------------


class TuneParameters(BaseModel):
    run: RunConfig
    config_path: Path | None = None
    resume: bool = False


class TuningService:
    """Drives a campaign: manifest, journal, parallel initial design, report."""

    def __init__(self, params: TuneParameters):
        self.params = params
        self.run = params.run
        self.out_dir = resolve_output_dir(self.run, "tune")
        self.store: Store | None = None
        self.result: CampaignResult | None = None
        self.report: dict[str, Any] = {}
        self.error: TunerException | None = None
        self.logger = logger

    def _journal_header(self) -> dict[str, Any]:
        campaign = self.run.campaign
        return {
            "method": campaign.method,
            "seed": campaign.seed,
            "labels": list(self.run.space.labels),
            "created_at": datetime.now().isoformat(),
        }

    def _check_resumed_manifest(self) -> None:
        """Warn about config sections that changed since the journaled run."""
        assert self.store is not None
        previous = self.store.load_manifest().get("config")
        if not isinstance(previous, dict):
            return
        current = self.run.model_dump(mode="json")
        changed = [key for key in ("episode", "campaign", "space") if previous.get(key) != current[key]]
        if changed:
            self.logger.warning(f"resuming with a changed config: {', '.join(changed)}", command="tune")

    async def _open_journal(self) -> list[TrialRecord]:
        assert self.store is not None
        if self.params.resume and self.store.journal_path.exists():
            header, records = self.store.load_journal()
            campaign = self.run.campaign
            if header.get("method") != campaign.method or header.get("seed") != campaign.seed:
                self.logger.warning(
                    f"resuming journal written with method={header.get('method')} seed={header.get('seed')}",
                    command="tune",
                )
            await self.store.rewrite_journal(header or self._journal_header(), records)
            self.logger.info(f"resuming after {len(records)} journaled trials", command="tune")
            return records
        if self.params.resume:
            self.logger.warning("no journal to resume, starting fresh", command="tune")
        await self.store.start_journal(self._journal_header())
        return []

    async def _record(self, campaign: Campaign, index, theta, y, metrics, phase) -> None:
        record = campaign.record(index, theta, y, metrics, phase)
        await self.store.append_trial(record)

    async def _initial_design(self, campaign: Campaign, objective: EpisodeObjective) -> None:
        pending = campaign.pending_init()
        if not pending:
            return
        loop = asyncio.get_running_loop()
        workers = self.run.workers
        if workers == 1:
            for index, theta in pending:
                y, metrics = await loop.run_in_executor(None, objective, theta)
                await self._record(campaign, index, theta, y, metrics, "init")
            return

        semaphore = asyncio.Semaphore(workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:

            async def evaluate(index: int, theta: np.ndarray):
                async with semaphore:
                    y, metrics = await loop.run_in_executor(pool, objective, theta)
                    self.logger.debug(f"initial trial {index} finished, J={y:.5g}", command="tune")
                    return index, theta, y, metrics

            results = await asyncio.gather(*(evaluate(i, t) for i, t in pending))
        for index, theta, y, metrics in sorted(results, key=lambda r: r[0]):
            await self._record(campaign, index, theta, y, metrics, "init")

    async def _optimize(self, campaign: Campaign, objective: EpisodeObjective) -> None:
        loop = asyncio.get_running_loop()
        while not campaign.done:
            theta = await loop.run_in_executor(None, campaign.propose)
            y, metrics = await loop.run_in_executor(None, objective, theta)
            await self._record(campaign, len(campaign.records), theta, y, metrics, "bo")

    def _build_report(self, result: CampaignResult, baseline: EpisodeMetrics | None) -> dict[str, Any]:
        best = result.records[int(np.argmin([r.y for r in result.records]))]
        report: dict[str, Any] = {
            "method": self.run.campaign.method,
            "seed": self.run.campaign.seed,
            "best_index": best.index,
            "best_J": result.y_best,
            "theta_best": dict(zip(result.labels, map(float, result.theta_best))),
            "n_trials": len(result.records),
            "phase_counts": result.phase_counts(),
            "stopped_early": result.stopped_early,
            "wall_time_s": result.wall_time,
            "best_so_far": result.best_trace().tolist(),
        }
        if baseline is not None:
            report["baseline"] = baseline.model_dump(mode="json")
            report["improvement_J_pct"] = improvement(1.0, result.y_best)
        if baseline is not None and best.metrics is not None and not best.metrics.failed:
            report["best_metrics"] = best.metrics.model_dump(mode="json")
            report["improvement_avg_error_pct"] = improvement(baseline.avg_error, best.metrics.avg_error)
            report["improvement_max_error_pct"] = improvement(baseline.max_error, best.metrics.max_error)
        if result.samples is not None:
            medians = result.samples.lengthscale_medians()
            report["lengthscale_median"] = dict(zip(result.labels, map(float, medians)))
        return report

    async def execute(self) -> int:
        started = time.perf_counter()
        try:
            self.store = Store(self.out_dir)
            if self.params.resume:
                self._check_resumed_manifest()
            manifest = RunManifest.build("tune", self.params.config_path, self.run, self.out_dir)
            self.store.write_manifest(manifest.model_dump(mode="json"))
            records = await self._open_journal()

            config = self.run.campaign
            baseline = None
            if not config.raw_objective:
                loop = asyncio.get_running_loop()
                baseline = await loop.run_in_executor(None, baseline_metrics, config.episode)
            objective = EpisodeObjective(config, baseline)
            campaign = Campaign(config, self.run.space, records)

            await self._initial_design(campaign, objective)
            self.logger.info(
                f"initial design done ({config.n_init} trials), best J={campaign.y_best:.5g}",
                command="tune",
            )
            await self._optimize(campaign, objective)

            self.result = campaign.result(time.perf_counter() - started)
            self.report = self._build_report(self.result, baseline)
            self.store.write_report(self.report)
            self.store.write_best_theta(self.result.theta_best, self.result.labels)
            if self.result.samples is not None:
                self.result.samples.dump(self.store.samples_path, list(self.result.labels))
            self.logger.success(f"report written to {self.store.report_path}", command="tune")
            return EXIT_OK
        except TunerException as e:
            self.error = e
            self.logger.warning(f"tuning failed: {e}", command="tune", e=e)
            return exit_code_for(e)


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def load_theta_file(path: str | Path, space: ParamSpace) -> np.ndarray:
    """A JSON list, or an object with ``theta`` as list or label mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("theta file not found", str(path), code=ErrorCode.CONFIG_NOT_FOUND)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", str(path), e.lineno) from e
    values = data.get("theta") if isinstance(data, dict) else data
    if isinstance(values, dict):
        missing = [label for label in space.labels if label not in values]
        if missing:
            raise ConfigError(f"missing parameters: {', '.join(missing)}", str(path))
        values = [values[label] for label in space.labels]
    if not isinstance(values, list) or len(values) != space.dim:
        raise ConfigError(f"theta must list {space.dim} numbers", str(path))
    try:
        return np.array([float(v) for v in values])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"theta entries must be numbers: {e}", str(path)) from e


class EvalParameters(BaseModel):
    run: RunConfig
    config_path: Path | None = None
    preset: str | None = None
    theta_path: Path | None = None
    wall_time: bool = False


class EvaluationService:
    """One episode at a preset or a theta file; writes the per-tick CSV."""

    def __init__(self, params: EvalParameters):
        self.params = params
        self.run = params.run
        self.out_dir = resolve_output_dir(self.run, "eval")
        self.metrics: EpisodeMetrics | None = None
        self.csv_path: Path | None = None
        self.error: TunerException | None = None
        self.logger = logger

    def _theta(self) -> np.ndarray:
        space = self.run.space
        if self.params.theta_path is not None:
            theta = load_theta_file(self.params.theta_path, space)
        else:
            name = self.params.preset or "default"
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}, choose from {', '.join(PRESETS)}")
            theta = np.array(PRESETS[name])
        bad = space.violations(theta)
        if bad:
            raise TunerException(
                "theta outside the parameter bounds: " + "; ".join(bad),
                code=ErrorCode.PARAM_OUT_OF_BOUNDS,
                details={"dimensions": bad},
            )
        return theta

    async def execute(self) -> int:
        try:
            theta = self._theta()
            store = Store(self.out_dir)
            manifest = RunManifest.build("eval", self.params.config_path, self.run, self.out_dir)
            store.write_manifest(manifest.model_dump(mode="json"))

            base = self.run.episode
            weights, gains = unpack_params(theta, base.weights)
            episode = base.with_params(weights, gains).model_copy(
                update={"record_log": True, "deterministic_time": not self.params.wall_time}
            )
            loop = asyncio.get_running_loop()
            self.metrics = await loop.run_in_executor(None, run_episode, episode)
            self.csv_path = write_episode_csv(self.metrics, self.out_dir / "episode.csv")
            # deterministic runs write identical bytes
            exclude = {"wall_time"} if episode.deterministic_time else None
            store.write_json("metrics.json", self.metrics.model_dump(mode="json", exclude=exclude))
            if self.metrics.failed:
                self.logger.error(f"episode failed: {self.metrics.failure_reason}", command="eval")
                return EXIT_RUNTIME
            return EXIT_OK
        except TunerException as e:
            self.error = e
            self.logger.warning(f"evaluation failed: {e}", command="eval", e=e)
            return exit_code_for(e)


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


class CompareParameters(BaseModel):
    journal_a: Path
    journal_b: Path
    out: Path | None = None


class CompareService:
    """Best-so-far traces of two journals side by side, as CSV."""

    def __init__(self, params: CompareParameters):
        self.params = params
        self.traces: tuple[np.ndarray, np.ndarray] | None = None
        self.out_path: Path | None = None
        self.logger = logger

    @staticmethod
    def _trace(path: Path) -> np.ndarray:
        _, records = read_journal(path)
        if not records:
            raise JournalError("journal has no trials", str(path))
        return best_so_far([r.y for r in sorted(records, key=lambda r: r.index)])

    def write_csv(self, path: Path) -> Path:
        assert self.traces is not None
        a, b = self.traces
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["iteration", "best_a", "best_b"])
            for i in range(max(len(a), len(b))):
                writer.writerow(
                    [i, repr(float(a[i])) if i < len(a) else "", repr(float(b[i])) if i < len(b) else ""]
                )
        return path

    async def execute(self) -> int:
        try:
            self.traces = (self._trace(self.params.journal_a), self._trace(self.params.journal_b))
            out = self.params.out or tuner_config.get_output_dir() / "compare.csv"
            self.out_path = self.write_csv(out)
            self.logger.info(f"comparison written to {self.out_path}", command="compare")
            return EXIT_OK
        except TunerException as e:
            self.logger.warning(f"comparison failed: {e}", command="compare", e=e)
            return exit_code_for(e)
        except OSError as e:
            self.logger.error(f"comparison output failed: {e}", command="compare", e=e)
            return EXIT_RUNTIME
