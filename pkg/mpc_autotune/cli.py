import asyncio
from pathlib import Path
import sys

from arclet.alconna import Alconna, Args, Arparma, CommandMeta, Option, Subcommand
from arclet.alconna.exceptions import SpecialOptionTriggered

from .handlers import handle_compare, handle_eval, handle_tune
from .log import configure_logging, logger
from .services import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME

PROG = "mpc-autotune"

mpc_autotune = Alconna(
    PROG,
    Option("--log-level", Args["level", str], dest="log_level", help_text="TRACE, DEBUG, INFO, WARNING or ERROR"),
    Option("--log-json", dest="log_json", help_text="one JSON record per log line on stderr"),
    Subcommand(
        "tune",
        Option("--config", Args["path", str], help_text="run config (YAML)"),
        Option("--seed", Args["seed", int], help_text="campaign and episode seed"),
        Option("--method", Args["method", str], help_text="saasbo or vanilla"),
        Option("--workers", Args["workers", int], help_text="parallel episodes in the initial design"),
        Option("--out", Args["out", str], help_text="output directory"),
        Option("--deterministic-time", dest="deterministic_time", help_text="solve time = iterations x 1 ms"),
        Option("--resume", help_text="continue from the journal in the output directory"),
        help_text="run a tuning campaign",
    ),
    Subcommand(
        "eval",
        Option("--config", Args["path", str], help_text="run config (YAML)"),
        Option("--preset", Args["preset", str], help_text="default, vanilla-bo or saasbo"),
        Option("--theta", Args["theta", str], help_text="JSON file with 12 parameter values"),
        Option("--seed", Args["seed", int]),
        Option("--shape", Args["shape", str], help_text="hexagon, square or circle"),
        Option("--out", Args["out", str], help_text="output directory"),
        Option("--wall-time", dest="wall_time", help_text="use measured solve times instead of iterations x 1 ms"),
        help_text="run one episode and write its CSV log",
    ),
    Subcommand(
        "compare",
        Args["journal_a", str]["journal_b", str],
        Option("--out", Args["out", str], help_text="CSV path for the best-so-far traces"),
        help_text="best-so-far traces of two campaign journals",
    ),
    meta=CommandMeta(
        description="Auto-tune MPC cost weights and feedback gains with Bayesian optimization",
        usage=(
            f"{PROG} tune [--config FILE] [--seed N] [--method saasbo|vanilla] [--workers N] "
            "[--out DIR] [--deterministic-time] [--resume]\n"
            f"{PROG} eval [--config FILE] [--preset NAME | --theta FILE] [--shape KIND] [--out DIR]\n"
            f"{PROG} compare JOURNAL_A JOURNAL_B [--out CSV]\n"
            "global options: --log-level LEVEL, --log-json\n"
            "exit codes: 0 success, 1 config error, 2 runtime failure"
        ),
        example=(
            f"{PROG} tune --config hexagon.yaml --method saasbo --seed 7\n"
            f"{PROG} eval --preset saasbo\n"
            f"{PROG} compare runs/a/journal.jsonl runs/b/journal.jsonl"
        ),
    ),
)


def _path(value: str | None) -> Path | None:
    return Path(value) if value is not None else None


async def dispatch(arp: Arparma) -> int:
    if arp.find("tune"):
        return await handle_tune(
            config_path=_path(arp.query("tune.config.path")),
            seed=arp.query("tune.seed.seed"),
            method=arp.query("tune.method.method"),
            workers=arp.query("tune.workers.workers"),
            deterministic_time=True if arp.find("tune.deterministic_time") else None,
            out=_path(arp.query("tune.out.out")),
            resume=arp.find("tune.resume"),
        )
    if arp.find("eval"):
        return await handle_eval(
            config_path=_path(arp.query("eval.config.path")),
            preset=arp.query("eval.preset.preset"),
            theta_path=_path(arp.query("eval.theta.theta")),
            seed=arp.query("eval.seed.seed"),
            shape=arp.query("eval.shape.shape"),
            out=_path(arp.query("eval.out.out")),
            wall_time=arp.find("eval.wall_time"),
        )
    if arp.find("compare"):
        return await handle_compare(
            journal_a=Path(arp.query("compare.journal_a")),
            journal_b=Path(arp.query("compare.journal_b")),
            out=_path(arp.query("compare.out.out")),
        )
    logger.error(f"no command given; try `{PROG} --help`", command="cli")
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    arp = mpc_autotune.parse([PROG, *argv])
    if not arp.matched:
        if isinstance(arp.error_info, SpecialOptionTriggered):
            return EXIT_OK
        configure_logging()
        logger.error(f"invalid command line: {arp.error_info}", command="cli")
        return EXIT_CONFIG

    level = arp.query("log_level.level") or "INFO"
    serialize = bool(arp.find("log_json"))
    try:
        configure_logging(level, serialize=serialize)
    except ValueError as e:
        configure_logging(serialize=serialize)
        logger.error(f"unknown log level {level!r}", command="cli", e=e)
        return EXIT_CONFIG

    try:
        return asyncio.run(dispatch(arp))
    except KeyboardInterrupt:
        logger.warning("interrupted", command="cli")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"unexpected error: {e}", command="cli", e=e)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())
