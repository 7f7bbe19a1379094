import numpy as np
import pytest

from asyncov.errors import ConfigError
from asyncov.estimands import CovariateQuery
from asyncov.fitting import FitResult, fit, init_theta, manifold_violations
from asyncov.likelihood import LogPosterior, ModelConfig, to_model
from asyncov.sampler import SamplerSettings
from asyncov.simulation import SimConfig, generate_truth, sim_design, simulate_dataset
from asyncov.whitening import WhiteningCache

TINY = SamplerSettings(chains=2, warmup_iters=60, retained_draws=60, max_leapfrog_depth=5, seed=4)


@pytest.fixture(scope="module")
def tiny_fit(sim_small):
    _, ds = sim_small
    return fit(ds, 2, TINY, include_time=False)


def test_init_deterministic_and_valid(sim_small):
    _, ds = sim_small
    wh = WhiteningCache.build(ds)
    cfg = ModelConfig.for_dataset(ds, 3, include_time=False)
    a = init_theta(ds, wh, cfg, np.random.default_rng(1))
    b = init_theta(ds, wh, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert manifold_violations(a, cfg) == 0
    assert np.isfinite(LogPosterior(ds, wh, cfg).log_prob(a))


@pytest.mark.parametrize("sync", [1.0, 0.75, 0.5, 0.25])
@pytest.mark.parametrize("rank", [1, 3, 5])
def test_init_finite_on_benchmark_data(sync, rank):
    rng = np.random.default_rng(int(sync * 100) + rank)
    ds = simulate_dataset(generate_truth(rng), SimConfig(N=30, sync_pct=sync), rng)
    wh = WhiteningCache.build(ds)
    cfg = ModelConfig.for_dataset(ds, rank, include_time=False)
    theta = init_theta(ds, wh, cfg, rng)
    assert np.isfinite(LogPosterior(ds, wh, cfg).log_prob(theta))


def test_fit_shapes_and_invariants(tiny_fit):
    assert tiny_fit.theta.shape[0] == 60
    assert manifold_violations(tiny_fit.theta, tiny_fit.config) == 0
    d = tiny_fit.diagnostics()
    assert len(d["rhat"]) == len(tiny_fit.draws.names)


def test_fit_deterministic(sim_small, tiny_fit):
    _, ds = sim_small
    again = fit(ds, 2, TINY, include_time=False)
    np.testing.assert_array_equal(again.theta, tiny_fit.theta)


def test_design_vector(tiny_fit):
    np.testing.assert_array_equal(tiny_fit.design({}), [1, 0, 0])
    np.testing.assert_array_equal(tiny_fit.design({"x2": 0.5}), [1, 0, 0.5])
    with pytest.raises(ConfigError, match="known"):
        tiny_fit.design({"age": 1})


def test_save_load_round_trip(tmp_path, tiny_fit):
    tiny_fit.save(tmp_path)
    back = FitResult.load(tmp_path)
    np.testing.assert_array_equal(back.theta, tiny_fit.theta)
    np.testing.assert_array_equal(back.sigma_bar, tiny_fit.sigma_bar)
    assert back.config == tiny_fit.config
    q = CovariateQuery(sim_design(1.0, 0.5), (0, 1))
    a = tiny_fit.summary(q, "cov")
    b = back.summary(q, "cov")
    np.testing.assert_array_equal(a.median, b.median)


def test_medians_agree_with_streaming(tiny_fit):
    designs = {(1.0, 0.25): sim_design(1.0, 0.25)}
    mc, mr = tiny_fit.posterior_medians(designs)
    q = CovariateQuery(designs[(1.0, 0.25)], (0, 1))
    np.testing.assert_allclose(mc[(1.0, 0.25)], tiny_fit.summary(q, "cov").median, atol=1e-12)
    np.testing.assert_allclose(mr[(1.0, 0.25)], tiny_fit.summary(q, "corr").median, atol=1e-12)


def test_self_pair_psd_per_draw(tiny_fit):
    q = CovariateQuery(sim_design(0.0, 1.0), (1, 1))
    for C in tiny_fit.estimand_draws(q, "cov"):
        np.testing.assert_allclose(C, C.T, atol=1e-14)
        assert np.linalg.eigvalsh(C).min() > -1e-12


def test_calibration_report(tiny_fit):
    rep = tiny_fit.calibration_report()
    assert rep["offset_used"] == "calibrated"
    assert rep["calibrated_offset"] == pytest.approx(np.log(2))
    assert rep["doubled_offset"] == pytest.approx(2 * np.log(2))
    assert "doubled_form" in rep and "calibrated_form" in rep


def test_rank_too_large(sim_small):
    _, ds = sim_small
    with pytest.raises(ConfigError, match="d <= min_k p_k"):
        fit(ds, 11, TINY)


def test_to_model_every_draw(tiny_fit):
    for theta in tiny_fit.theta[::7]:
        p = to_model(theta, tiny_fit.config)
        assert np.all(np.diag(p.A) > 0)
        assert np.all(p.omega_b_diag > 0)
