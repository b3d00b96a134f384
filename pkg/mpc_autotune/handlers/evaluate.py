from pathlib import Path
import sys

from ..log import logger
from ..services import EXIT_CONFIG, EXIT_OK, EvalParameters, EvaluationService, exit_code_for, load_run
from ..utils.core import TunerException


async def handle_eval(
    config_path: Path | None,
    preset: str | None = None,
    theta_path: Path | None = None,
    seed: int | None = None,
    shape: str | None = None,
    out: Path | None = None,
    wall_time: bool = False,
) -> int:
    try:
        run = load_run(config_path).with_overrides(seed=seed, shape=shape, output_dir=out)
    except TunerException as e:
        logger.error(f"invalid configuration: {e}", command="eval")
        return exit_code_for(e)
    if preset is not None and theta_path is not None:
        logger.error("pass either a preset or a theta file, not both", command="eval")
        return EXIT_CONFIG

    params = EvalParameters(
        run=run, config_path=config_path, preset=preset, theta_path=theta_path, wall_time=wall_time
    )
    service = EvaluationService(params)
    code = await service.execute()
    metrics = service.metrics
    if metrics is None:
        if service.error is not None:
            print(f"error: {service.error.user_friendly_message}", file=sys.stderr)
        return code

    label = f"preset {preset or 'default'}" if theta_path is None else str(theta_path)
    print(f"{label}:")
    print(f"  avg error  {metrics.avg_error * 1e3:.3f} mm (std {metrics.std_error * 1e3:.3f} mm)")
    print(f"  max error  {metrics.max_error * 1e3:.3f} mm")
    print(f"  solve time {metrics.mean_solve_time * 1e3:.3f} ms, {metrics.mean_iterations:.2f} iterations")
    print(f"  violations {metrics.violations} of {metrics.n_solves} solves")
    if metrics.failed:
        print(f"  FAILED: {metrics.failure_reason}")
    if code == EXIT_OK:
        print(f"episode log: {service.csv_path}")
    return code
