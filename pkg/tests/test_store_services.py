import asyncio
import csv
import json

import numpy as np
from loguru import logger as loguru_logger
import pytest

from mpc_autotune.bo import ParamSpace, TrialRecord
from mpc_autotune.config import PRESETS
from mpc_autotune.services import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    CompareParameters,
    CompareService,
    EvalParameters,
    EvaluationService,
    RunConfig,
    RunManifest,
    TuneParameters,
    TuningService,
    improvement,
    load_run_config,
    load_theta_file,
)
from mpc_autotune.store import Store, read_journal
from mpc_autotune.utils.core import ConfigError, ErrorCode, JournalError, TunerException


def _record(index: int, y: float, phase: str = "init") -> TrialRecord:
    return TrialRecord(index=index, theta=[0.1 * index, 0.2], theta_unit=[0.1 * index, 0.2], y=y, phase=phase)


def _write_journal(store: Store, ys) -> None:
    async def write():
        await store.start_journal({"method": "vanilla", "seed": 0})
        for i, y in enumerate(ys):
            await store.append_trial(_record(i, y))

    asyncio.run(write())


def test_journal_round_trip(tmp_path):
    store = Store(tmp_path / "run")
    _write_journal(store, [3.0, 2.0, 2.5])
    header, records = store.load_journal()
    assert header == {"method": "vanilla", "seed": 0}
    assert [r.y for r in records] == [3.0, 2.0, 2.5]
    assert [r.index for r in records] == [0, 1, 2]


def test_truncated_last_line_is_dropped(tmp_path):
    store = Store(tmp_path)
    _write_journal(store, [3.0, 2.0])
    text = store.journal_path.read_text()
    store.journal_path.write_text(text + '{"type": "trial", "index": 2, "the')
    _, records = read_journal(store.journal_path)
    assert len(records) == 2

    asyncio.run(store.rewrite_journal({"method": "vanilla"}, records))
    assert store.journal_path.read_text().endswith("\n")
    assert len(read_journal(store.journal_path)[1]) == 2


def test_corrupt_middle_line_is_an_error(tmp_path):
    store = Store(tmp_path)
    _write_journal(store, [3.0, 2.0])
    lines = store.journal_path.read_text().splitlines()
    lines.insert(2, "not json")
    store.journal_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(JournalError) as info:
        read_journal(store.journal_path)
    assert info.value.code is ErrorCode.JOURNAL_CORRUPT
    assert ":3:" in info.value.message


def test_missing_journal(tmp_path):
    with pytest.raises(JournalError):
        read_journal(tmp_path / "nope.jsonl")


def test_corrupted_manifest_is_moved_aside(tmp_path):
    store = Store(tmp_path)
    store.manifest_path.write_text("{broken")
    assert store.load_manifest() == {}
    assert not store.manifest_path.exists()
    assert list(tmp_path.glob("manifest.json.corrupted_*"))


def test_best_theta_file_feeds_back_into_eval(tmp_path):
    space = ParamSpace()
    path = Store(tmp_path).write_best_theta(PRESETS["saasbo"], space.labels)
    np.testing.assert_allclose(load_theta_file(path, space), PRESETS["saasbo"])


def test_theta_file_formats(tmp_path):
    space = ParamSpace()
    as_list = tmp_path / "list.json"
    as_list.write_text(json.dumps(PRESETS["default"]))
    np.testing.assert_array_equal(load_theta_file(as_list, space), PRESETS["default"])

    short = tmp_path / "short.json"
    short.write_text(json.dumps({"theta": [1.0, 2.0]}))
    with pytest.raises(ConfigError):
        load_theta_file(short, space)

    with pytest.raises(ConfigError) as info:
        load_theta_file(tmp_path / "missing.json", space)
    assert info.value.code is ErrorCode.CONFIG_NOT_FOUND


def test_run_config_errors_carry_the_line(planar_run):
    path = planar_run
    path.write_text(path.read_text().replace("n_init: 3", "n_init: 1"))
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.line == 12
    assert info.value.is_config_error


def test_missing_robot_is_reported_at_its_line(planar_run):
    path = planar_run
    path.write_text(path.read_text().replace("robot: planar2", "robot: robots/arm.yaml"))
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.line == 2


def test_run_config_shares_the_episode(planar_run, tmp_path):
    path = planar_run
    run = load_run_config(path)
    assert run.episode.robot == "planar2"
    assert run.campaign.episode == run.episode
    assert run.campaign.n_max == 4


def test_overrides_are_validated():
    run = RunConfig().with_overrides(seed=7, method="vanilla", deterministic_time=True, shape="circle")
    assert run.campaign.seed == run.episode.seed == 7
    assert run.campaign.method == "vanilla"
    assert run.campaign.episode.deterministic_time
    assert run.episode.shape.kind.value == "circle"
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(method="random")
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(workers=0)


def test_manifest_records_the_run(tmp_path):
    run = RunConfig()
    manifest = RunManifest.build("tune", None, run, tmp_path)
    assert manifest.seed == 0
    assert {"mpc_autotune", "numpy", "scipy", "pydantic"} <= set(manifest.versions)
    assert manifest.config["campaign"]["n_init"] == 100


def test_improvement_percent():
    assert improvement(2.0, 1.0) == pytest.approx(50.0)
    assert improvement(0.0, 1.0) == 0.0


def test_out_of_bounds_theta_is_a_config_error(tmp_path):
    theta = list(PRESETS["default"])
    theta[4] = 500.0
    path = tmp_path / "theta.json"
    path.write_text(json.dumps({"theta": theta}))
    run = RunConfig(output_dir=tmp_path / "eval")
    service = EvaluationService(EvalParameters(run=run, theta_path=path))
    with pytest.raises(TunerException) as info:
        service._theta()
    assert info.value.code is ErrorCode.PARAM_OUT_OF_BOUNDS
    assert asyncio.run(service.execute()) == EXIT_CONFIG


def test_unknown_preset_is_a_config_error(tmp_path):
    run = RunConfig(output_dir=tmp_path)
    service = EvaluationService(EvalParameters(run=run, preset="hand-tuned"))
    assert asyncio.run(service.execute()) == EXIT_CONFIG


def test_eval_writes_log_and_metrics(planar_run, tmp_path):
    path = planar_run
    run = load_run_config(path).with_overrides(output_dir=tmp_path / "out")
    service = EvaluationService(EvalParameters(run=run, config_path=path, preset="default"))
    assert asyncio.run(service.execute()) == EXIT_OK
    assert service.csv_path == tmp_path / "out" / "episode.csv"
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["n_ticks"] == 10
    assert not metrics["failed"]
    assert (tmp_path / "out" / "manifest.json").exists()


def _compare(tmp_path, ys_a, ys_b):
    a, b = Store(tmp_path / "a"), Store(tmp_path / "b")
    _write_journal(a, ys_a)
    _write_journal(b, ys_b)
    out = tmp_path / "compare.csv"
    service = CompareService(CompareParameters(journal_a=a.journal_path, journal_b=b.journal_path, out=out))
    code = asyncio.run(service.execute())
    with out.open(newline="") as f:
        rows = list(csv.reader(f)) if out.exists() else []
    return code, rows


def test_compare_identical_journals(tmp_path):
    code, rows = _compare(tmp_path, [3.0, 1.0, 2.0], [3.0, 1.0, 2.0])
    assert code == EXIT_OK
    assert rows[0] == ["iteration", "best_a", "best_b"]
    assert [float(r[1]) for r in rows[1:]] == [3.0, 1.0, 1.0]
    assert all(r[1] == r[2] for r in rows[1:])


def test_compare_journals_of_different_lengths(tmp_path):
    code, rows = _compare(tmp_path, [3.0, 1.0], [5.0, 4.0, 0.5, 0.7])
    assert code == EXIT_OK
    assert len(rows) == 5
    assert rows[-1] == ["3", "", "0.5"]


def test_compare_with_a_missing_journal(tmp_path):
    a = Store(tmp_path / "a")
    _write_journal(a, [1.0])
    service = CompareService(CompareParameters(journal_a=a.journal_path, journal_b=tmp_path / "none.jsonl"))
    assert asyncio.run(service.execute()) == EXIT_RUNTIME


def test_deterministic_eval_writes_identical_metrics(planar_run, tmp_path):
    run = load_run_config(planar_run)
    outputs = []
    for name in ("a", "b"):
        service = EvaluationService(EvalParameters(run=run.with_overrides(output_dir=tmp_path / name), preset="saasbo"))
        assert asyncio.run(service.execute()) == EXIT_OK
        outputs.append((tmp_path / name / "metrics.json").read_bytes())
    assert outputs[0] == outputs[1]
    assert "wall_time" not in json.loads(outputs[0])


def test_wall_time_eval_reports_the_episode_time(planar_run, tmp_path):
    run = load_run_config(planar_run).with_overrides(output_dir=tmp_path)
    service = EvaluationService(EvalParameters(run=run, wall_time=True))
    assert asyncio.run(service.execute()) == EXIT_OK
    assert json.loads((tmp_path / "metrics.json").read_text())["wall_time"] > 0.0


def test_resuming_with_a_changed_config_warns(tmp_path):
    run = RunConfig(output_dir=tmp_path)
    store = Store(tmp_path)
    old = run.with_overrides(seed=5)
    store.write_manifest(RunManifest.build("tune", None, old, tmp_path).model_dump(mode="json"))
    service = TuningService(TuneParameters(run=run, resume=True))
    service.store = store

    messages = []
    handler = loguru_logger.add(messages.append, level="WARNING", format="{message}")
    try:
        service._check_resumed_manifest()
        store.write_manifest(RunManifest.build("tune", None, run, tmp_path).model_dump(mode="json"))
        service._check_resumed_manifest()
    finally:
        loguru_logger.remove(handler)
    assert len(messages) == 1
    assert "episode, campaign" in messages[0]


def test_user_friendly_messages():
    assert TunerException("bad line 3", code=ErrorCode.JOURNAL_CORRUPT).user_friendly_message == (
        "Campaign journal is corrupt."
    )
    assert TunerException("theta has 3 entries").user_friendly_message == "theta has 3 entries"
