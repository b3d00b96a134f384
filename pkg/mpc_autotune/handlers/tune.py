from pathlib import Path
import sys

from ..log import logger
from ..services import EXIT_OK, TuneParameters, TuningService, exit_code_for, load_run
from ..utils.core import TunerException


async def handle_tune(
    config_path: Path | None,
    seed: int | None = None,
    method: str | None = None,
    workers: int | None = None,
    deterministic_time: bool | None = None,
    out: Path | None = None,
    resume: bool = False,
) -> int:
    try:
        run = load_run(config_path).with_overrides(
            seed=seed,
            method=method,
            workers=workers,
            deterministic_time=deterministic_time,
            output_dir=out,
        )
    except TunerException as e:
        logger.error(f"invalid configuration: {e}", command="tune")
        return exit_code_for(e)

    campaign = run.campaign
    logger.info(
        f"tuning with {campaign.method}, seed {campaign.seed}, "
        f"{campaign.n_init} initial + up to {campaign.n_max - campaign.n_init} BO trials",
        command="tune",
    )
    service = TuningService(TuneParameters(run=run, config_path=config_path, resume=resume))
    code = await service.execute()
    if code != EXIT_OK:
        if service.error is not None:
            print(f"error: {service.error.user_friendly_message}", file=sys.stderr)
        return code

    report = service.report
    print(f"best J: {report['best_J']:.6g} (trial {report['best_index']} of {report['n_trials']})")
    if "improvement_avg_error_pct" in report:
        print(
            f"avg error improvement: {report['improvement_avg_error_pct']:+.1f}%, "
            f"max error improvement: {report['improvement_max_error_pct']:+.1f}%"
        )
    if "improvement_J_pct" in report:
        print(f"J improvement over baseline: {report['improvement_J_pct']:+.1f}%")
    print(f"artifacts: {service.out_dir}")
    return EXIT_OK
