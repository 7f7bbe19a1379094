import math

import numpy as np
import pytest
from scipy import stats

from asyncov.data_model import validate
from asyncov.errors import ConfigError
from asyncov.simulation import (
    X2_GRID,
    SimConfig,
    SimTruth,
    covariate_grid,
    evaluation_loss,
    generate_truth,
    haar_orthogonal,
    sim_design,
    simulate_dataset,
    true_covariance,
    true_cross_targets,
    truth_targets,
)


def test_haar_orthogonal(rng):
    Q = haar_orthogonal(20, rng)
    assert np.abs(Q.T @ Q - np.eye(20)).max() < 1e-10


def test_haar_first_column_marginal():
    # an entry of a uniform unit vector in R^20 has u^2 ~ Beta(1/2, 19/2)
    rng = np.random.default_rng(8)
    u = np.array([haar_orthogonal(20, rng)[0, 0] for _ in range(10_000)])
    assert stats.kstest(u ** 2, stats.beta(0.5, 9.5).cdf).statistic < 0.02
    assert abs(np.mean(u > 0) - 0.5) < 0.02


def test_laplace_scale():
    rng = np.random.default_rng(9)
    vals = np.concatenate([generate_truth(rng).A_true.ravel() for _ in range(10_000)])
    assert np.std(vals) == pytest.approx(0.1 * math.sqrt(2), rel=0.03)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(sync_pct=1.5)
    with pytest.raises(ConfigError):
        SimConfig(N=0)


def test_dataset_shape(rng):
    truth = generate_truth(rng)
    ds = simulate_dataset(truth, SimConfig(N=30), rng)
    assert len(ds.records) == 150
    assert ds.n_subjects == 30
    assert all(r.mask == (0, 1) for r in ds.records)
    x1 = {r.subject_id: r.covariates[0] for r in ds.records}
    assert len(x1) == 30 and set(x1.values()) <= {0.0, 1.0}
    for sid, rows in ds.subjects.items():
        assert [ds.records[i].covariates[1] for i in rows] == list(X2_GRID)
        assert len({ds.records[i].covariates[0] for i in rows}) == 1


def test_masking_binomial():
    rng = np.random.default_rng(3)
    truth = generate_truth(rng)
    ds = simulate_dataset(truth, SimConfig(N=2000, sync_pct=0.25), rng)
    n_full = validate(ds)["n_synchronous"]
    assert stats.binomtest(n_full, len(ds.records), 0.25).pvalue > 0.01
    singles = [r.mask for r in ds.records if len(r.mask) == 1]
    assert stats.binomtest(sum(m == (0,) for m in singles), len(singles), 0.5).pvalue > 0.01


def test_lower_synchrony_nests():
    truth = generate_truth(np.random.default_rng(1))
    full = simulate_dataset(truth, SimConfig(N=20, sync_pct=1.0), np.random.default_rng(2))
    part = simulate_dataset(truth, SimConfig(N=20, sync_pct=0.5), np.random.default_rng(2))
    for a, b in zip(full.records, part.records):
        for k in b.mask:
            np.testing.assert_array_equal(a.block(k, truth.layout), b.block(k, truth.layout))


def test_generator_moments():
    rng = np.random.default_rng(11)
    truth = generate_truth(rng)
    x1, x2 = 1.0, 0.5
    x = sim_design(x1, x2)
    n = 100_000
    sd = np.exp(0.5 * truth.B_true @ x)
    Y = (rng.standard_normal((n, 20)) * sd) @ truth.gamma_star.T
    target = true_covariance(truth, x1, x2)
    err = np.linalg.norm(np.cov(Y, rowvar=False) - target) / np.linalg.norm(target)
    assert err < 0.05


def test_true_targets(rng):
    truth = generate_truth(rng)
    zero = SimTruth(truth.gamma_star, truth.A_true, np.zeros_like(truth.B_true))
    S12, R12 = true_cross_targets(zero, 1.0, 0.25)
    assert np.abs(S12).max() < 1e-12 and np.abs(R12).max() < 1e-12

    S = true_covariance(truth, 0.0, 0.75)
    S12, R12 = true_cross_targets(truth, 0.0, 0.75)
    np.testing.assert_allclose(S12, S[10:, :10].T, atol=1e-15)
    G = truth.gamma_star
    dense = G @ np.diag(np.exp(truth.B_true @ sim_design(0.0, 0.75))) @ G.T
    assert np.abs(S12 - dense[:10, 10:]).max() < 1e-12
    assert np.abs(R12).max() <= 1.0


def test_evaluation_loss(rng):
    truth = generate_truth(rng)
    cov, corr = truth_targets(truth)
    assert len(covariate_grid()) == 10
    assert evaluation_loss(cov, cov) == 0.0
    est = {k: v.copy() for k, v in cov.items()}
    est[(1.0, 0.5)][2, 3] += 0.3
    assert evaluation_loss(est, cov, "frobenius") == pytest.approx(0.03)
    assert evaluation_loss(est, cov, "max") == pytest.approx(0.03)
    with pytest.raises(ConfigError):
        evaluation_loss({}, cov)
    with pytest.raises(ConfigError):
        evaluation_loss(cov, cov, "nuclear")
