import numpy as np
import pytest
from scipy.stats import norm

from mpc_autotune.bo import (
    CampaignConfig,
    ParamSpace,
    best_so_far,
    expected_improvement,
    latin_hypercube,
    maximize_acquisition,
    run_campaign,
    vanilla_fit,
    vanilla_neg_log_posterior,
)
from mpc_autotune.config import PRESETS
from mpc_autotune.gp import KernelHyperparams, MixturePosterior, PosteriorSamples, TrialDataset, kernel_matrix
from mpc_autotune.utils.core import TunerException


BRANIN_MIN = 0.397887


def _branin(space, dims=(0, 1)):
    def evaluate(theta):
        x1, x2 = 15.0 * theta[dims[0]] - 5.0, 15.0 * theta[dims[1]]
        b, c, t = 5.1 / (4 * np.pi**2), 5.0 / np.pi, 1.0 / (8 * np.pi)
        y = (x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1 - t) * np.cos(x1) + 10.0
        return float(y), None

    return evaluate


def test_latin_hypercube_fills_every_quartile():
    design = latin_hypercube(ParamSpace.unit(2), 4, seed=0)
    for column in design.T:
        assert sorted(np.floor(column * 4).astype(int)) == [0, 1, 2, 3]


def test_latin_hypercube_stratifies_the_default_space():
    space = ParamSpace()
    design = latin_hypercube(space, 100, seed=7)
    assert design.shape == (100, 12)
    assert not space.violations(design[0])
    cells = np.floor(space.to_unit(design) * 100).astype(int)
    for column in cells.T:
        assert sorted(column) == list(range(100))


def test_latin_hypercube_covers_log_decades():
    design = latin_hypercube(ParamSpace(), 100, seed=3)
    decades = np.floor(np.log10(design[:, 0])).astype(int)
    counts = np.bincount(decades - 3, minlength=4)
    np.testing.assert_array_equal(counts, [25, 25, 25, 25])


def test_latin_hypercube_is_seeded():
    np.testing.assert_array_equal(latin_hypercube(ParamSpace(), 5, 11), latin_hypercube(ParamSpace(), 5, 11))
    with pytest.raises(TunerException):
        latin_hypercube(ParamSpace(), 0, 11)


def test_expected_improvement_closed_form():
    assert expected_improvement(0.5, 0.0, 0.2) == 0.0
    assert expected_improvement(0.1, 0.0, 0.2) == pytest.approx(0.1)
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(0.39894, abs=1e-5)
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(norm.pdf(0.0))
    with pytest.raises(TunerException):
        expected_improvement(0.0, -1.0, 0.0)


def test_expected_improvement_matches_monte_carlo(rng):
    mean, std, best = 0.3, 0.5, 0.1
    draws = rng.normal(mean, std, 1_000_000)
    mc = np.mean(np.maximum(best - draws, 0.0))
    assert expected_improvement(mean, std, best) == pytest.approx(mc, rel=1e-2)


def test_expected_improvement_is_vectorized():
    ei = expected_improvement(np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 1.0]), 0.5)
    assert ei.shape == (3,)
    assert ei[0] > ei[1] > ei[2] > 0.0


def _quadratic_data():
    X = np.array([[0.0], [0.2], [0.8], [1.0]])
    return TrialDataset(X, (X[:, 0] - 0.5) ** 2)


def test_acquisition_proposes_inside_the_cube():
    data = _quadratic_data()
    samples = PosteriorSamples([KernelHyperparams(1.0, np.array([0.3]))], np.array([0.1]))
    space = ParamSpace.unit(1)
    u = maximize_acquisition(samples, data, space, seed=5, raw_samples=64, restarts=4)
    assert u.shape == (1,)
    assert 0.2 < u[0] < 0.8
    np.testing.assert_array_equal(u, maximize_acquisition(samples, data, space, seed=5, raw_samples=64, restarts=4))


def test_acquisition_matches_a_brute_force_grid(rng):
    X = rng.uniform(0, 1, (8, 2))
    data = TrialDataset(X, np.sin(3.0 * X[:, 0]) + np.cos(4.0 * X[:, 1]))
    samples = PosteriorSamples([KernelHyperparams(1.0, np.array([0.3, 0.4]))], np.array([0.1]))
    posterior = MixturePosterior(samples, data)
    best = float(np.min(data.y_std))

    def ei(U):
        mean, var = posterior.predict(U)
        return np.atleast_1d(expected_improvement(mean, np.sqrt(var), best))

    axis = np.linspace(0.0, 1.0, 100)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    u = maximize_acquisition(samples, data, ParamSpace.unit(2), seed=3)
    assert ei(u[None])[0] >= 0.99 * ei(grid).max()


def test_vanilla_fit_recovers_the_lengthscale(rng):
    X = rng.uniform(0, 1, (60, 1))
    truth = KernelHyperparams(1.0, np.array([0.25]))
    K = kernel_matrix(X, X, truth) + 1e-6 * np.eye(60)
    y = np.linalg.cholesky(K) @ rng.standard_normal(60)
    hyper = vanilla_fit(TrialDataset(X, y), seed=0)
    assert 0.125 < hyper.lengthscales[0] < 0.5


def test_vanilla_fit_improves_on_unit_start(rng):
    X = rng.uniform(0, 1, (15, 2))
    data = TrialDataset(X, np.sin(5 * X[:, 0]) + 0.1 * X[:, 1])
    hyper = vanilla_fit(data, seed=2)
    fitted = np.concatenate([np.log(hyper.lengthscales), [np.log(hyper.outputscale)]])
    assert vanilla_neg_log_posterior(fitted, data)[0] <= vanilla_neg_log_posterior(np.zeros(3), data)[0]
    again = vanilla_fit(data, seed=2)
    np.testing.assert_array_equal(again.lengthscales, hyper.lengthscales)


def test_param_space_round_trip():
    space = ParamSpace()
    theta = np.array(PRESETS["saasbo"])
    np.testing.assert_allclose(space.from_unit(space.to_unit(theta)), theta, rtol=1e-12)
    assert space.to_unit(space.lower).tolist() == [0.0] * 12
    assert space.to_unit(space.upper).tolist() == pytest.approx([1.0] * 12)
    unit = ParamSpace.unit(3)
    np.testing.assert_allclose(unit.to_unit([0.25, 0.5, 1.0]), [0.25, 0.5, 1.0])


def test_param_space_reports_violations():
    space = ParamSpace()
    theta = np.array(PRESETS["default"])
    assert space.violations(theta) == []
    theta[4] = 500.0
    theta[1] = 1.0
    labels = space.violations(theta)
    assert len(labels) == 2
    assert labels[0].startswith(space.labels[1])
    with pytest.raises(TunerException):
        space.violations(np.ones(3))


def test_param_space_validation():
    with pytest.raises(ValueError):
        ParamSpace(lower=(1.0,), upper=(0.5,), log=(False,), labels=("a",))
    with pytest.raises(ValueError):
        ParamSpace(lower=(0.0,), upper=(1.0,), log=(True,), labels=("a",))


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig(n_init=10, n_max=10)
    with pytest.raises(ValueError):
        CampaignConfig(n_init=1, n_max=10)
    with pytest.raises(ValueError):
        CampaignConfig(patience=0)
    with pytest.raises(ValueError):
        CampaignConfig(alpha=1.2)


def test_best_so_far_is_monotone():
    trace = best_so_far([3.0, 4.0, 1.0, 2.0, 0.5])
    np.testing.assert_array_equal(trace, [3.0, 3.0, 1.0, 1.0, 0.5])
    assert best_so_far([]).size == 0


def test_patience_stops_a_flat_campaign():
    config = CampaignConfig(n_init=4, n_max=50, patience=1, method="vanilla", seed=1)
    seen = []
    result = run_campaign(config, ParamSpace.unit(2), evaluate=lambda theta: (1.0, None), on_trial=seen.append)
    assert len(result.records) == config.n_init + 2
    assert result.stopped_early
    assert result.phase_counts() == {"init": 4, "bo": 2}
    assert [r.index for r in seen] == list(range(6))
    assert result.y_best == 1.0


def test_campaign_respects_the_budget():
    space = ParamSpace.unit(2)
    config = CampaignConfig(n_init=5, n_max=8, patience=100, method="vanilla", seed=0)
    result = run_campaign(config, space, evaluate=_branin(space))
    assert len(result.records) == 8
    assert not result.stopped_early
    assert result.y_best == min(r.y for r in result.records)
    np.testing.assert_array_equal(result.theta_best, result.records[int(np.argmin([r.y for r in result.records]))].theta)
    for record in result.records:
        assert not space.violations(record.theta)


def test_campaign_is_reproducible():
    space = ParamSpace.unit(2)
    config = CampaignConfig(n_init=4, n_max=6, method="vanilla", seed=9)
    a = run_campaign(config, space, evaluate=_branin(space))
    b = run_campaign(config, space, evaluate=_branin(space))
    assert [r.theta for r in a.records] == [r.theta for r in b.records]


def test_campaign_resumes_from_records():
    space = ParamSpace.unit(2)
    config = CampaignConfig(n_init=4, n_max=6, method="vanilla", seed=9)
    full = run_campaign(config, space, evaluate=_branin(space))
    calls = []

    def counting(theta):
        calls.append(theta)
        return _branin(space)(theta)

    resumed = run_campaign(config, space, evaluate=counting, records=full.records[:3])
    assert len(calls) == 3
    assert [r.theta for r in resumed.records] == [r.theta for r in full.records]


@pytest.mark.slow
def test_vanilla_campaign_finds_a_branin_minimum():
    space = ParamSpace.unit(2)
    config = CampaignConfig(n_init=10, n_max=40, patience=40, method="vanilla", seed=0)
    result = run_campaign(config, space, evaluate=_branin(space))
    assert result.y_best < 1.0


@pytest.mark.slow
def test_saasbo_campaign_improves_on_its_design():
    space = ParamSpace.unit(2)
    config = CampaignConfig(
        n_init=8, n_max=20, patience=20, method="saasbo", seed=0, nuts_warmup=128, nuts_samples=128, nuts_thin=16
    )
    result = run_campaign(config, space, evaluate=_branin(space))
    init_best = min(r.y for r in result.records if r.phase == "init")
    assert result.y_best < init_best


@pytest.mark.slow
def test_saasbo_finds_branin_embedded_in_twelve_dimensions():
    space = ParamSpace.unit(12)
    hits = 0
    for seed in range(3):
        config = CampaignConfig(n_init=20, n_max=50, patience=50, method="saasbo", seed=seed)
        result = run_campaign(config, space, evaluate=_branin(space, dims=(3, 8)))
        hits += result.y_best - BRANIN_MIN < 0.5
    assert hits >= 2
