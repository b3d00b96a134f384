"""Desk-scale tuning campaigns on the UR10e hexagon; all slow."""

from functools import lru_cache

import numpy as np
import pytest

from mpc_autotune.bo import run_campaign
from mpc_autotune.config import CONFIGS_PATH
from mpc_autotune.services import load_run_config

SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


@lru_cache(maxsize=None)
def _desk_best(method: str, seed: int) -> float:
    run = load_run_config(CONFIGS_PATH / "desk.yaml").with_overrides(seed=seed, method=method)
    return run_campaign(run.campaign, run.space).y_best


def test_desk_campaign_beats_the_default_by_a_fifth():
    assert np.median([_desk_best("saasbo", seed) for seed in SEEDS]) <= 0.8


def test_saasbo_is_no_worse_than_vanilla():
    saasbo = np.median([_desk_best("saasbo", seed) for seed in SEEDS])
    vanilla = np.median([_desk_best("vanilla", seed) for seed in SEEDS])
    assert saasbo <= vanilla
