import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import asyncov.whitening as wh
from asyncov.data_model import Dataset, ModalityLayout, ObservationRecord
from asyncov.errors import DataError, NumericalError
from asyncov.whitening import WhiteningCache, empirical_covariance, pattern_whitener, sym_inv_sqrt

from conftest import make_dataset


def _iid_dataset(rng, n, dims):
    lay = ModalityLayout.generic(dims)
    Y = rng.standard_normal((n, lay.p))
    recs = tuple(ObservationRecord(f"s{i}", 1, 0, [], lay.full_mask(), Y[i]) for i in range(n))
    return Dataset(lay, recs), Y


def test_iid_normal_gives_identity(rng):
    ds, _ = _iid_dataset(rng, 5000, [3, 4])
    S = empirical_covariance(ds).sigma_bar
    assert np.abs(S - np.eye(7)).max() < 0.1


def test_synchronous_matches_sample_covariance(rng):
    ds, Y = _iid_dataset(rng, 50, [2, 3])
    cov = empirical_covariance(ds)
    np.testing.assert_allclose(cov.sigma_bar, np.cov(Y, rowvar=False), rtol=0, atol=1e-12)
    assert cov.n_clipped == 0


def test_indefinite_pairwise_is_repaired(rng):
    # three singleton modalities; each pair observed on disjoint records with
    # correlations (+0.95, +0.95, -0.95), which no PSD matrix can hold
    lay = ModalityLayout.generic([1, 1, 1])
    recs = []
    for (a, b), sign in (((0, 1), 1), ((1, 2), 1), ((0, 2), -1)):
        for i in range(200):
            z = rng.standard_normal()
            e = rng.standard_normal()
            y = [z, sign * (0.95 * z + math.sqrt(1 - 0.95 ** 2) * e)]
            recs.append(ObservationRecord(f"s{len(recs)}", 1, 0, [], (a, b), y))
    cov = empirical_covariance(Dataset(lay, tuple(recs)))
    w = np.linalg.eigvalsh(cov.sigma_bar)
    assert cov.n_clipped >= 1
    assert w.min() >= cov.floor * (1 - 1e-8)
    assert cov.floor == pytest.approx(1e-6 * w.max(), rel=1e-6)


def test_rarely_observed_variable_rejected():
    lay = ModalityLayout.generic([1, 1])
    recs = (ObservationRecord("a", 1, 0, [], (0,), [1.0]), ObservationRecord("b", 1, 0, [], (0, 1), [2.0, 3.0]),
            ObservationRecord("c", 1, 0, [], (0,), [0.0]))
    with pytest.raises(DataError, match="y2_1"):
        empirical_covariance(Dataset(lay, recs))


def test_sym_inv_sqrt_examples(rng):
    np.testing.assert_allclose(sym_inv_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(sym_inv_sqrt(np.diag([4.0, 9.0])), np.diag([0.5, 1 / 3]), atol=1e-14)
    X = rng.standard_normal((6, 6))
    M = X @ X.T + 0.5 * np.eye(6)
    R = sym_inv_sqrt(M)
    assert np.abs(R @ M @ R - np.eye(6)).max() < 1e-8
    with pytest.raises(NumericalError, match="symmetric"):
        sym_inv_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_pattern_whitener_blocks_and_cache(monkeypatch):
    lay = ModalityLayout.generic([3, 4])
    d = np.arange(1.0, 8.0)
    cov = wh.EmpiricalCov(np.diag(d), 1e-6)
    sub, R = pattern_whitener(cov, (0, 1), lay)
    np.testing.assert_array_equal(sub, np.diag(d))
    sub, R = pattern_whitener(cov, (0,), lay)
    np.testing.assert_array_equal(sub, np.diag(d[:3]))
    np.testing.assert_allclose(R, np.diag(d[:3] ** -0.5), atol=1e-14)

    calls = []
    real = wh.sym_inv_sqrt
    monkeypatch.setattr(wh, "sym_inv_sqrt", lambda M, *a: calls.append(1) or real(M, *a))
    first = pattern_whitener(cov, (1,), lay)
    second = pattern_whitener(cov, (1,), lay)
    assert first is second
    assert len(calls) == 1


def test_cache_built_eagerly(rng):
    ds = make_dataset(rng, dims=(3, 4), n_subjects=10)
    cache = WhiteningCache.build(ds)
    assert set(cache.cov._patterns) == set(ds.masks())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_whitening_identity_every_mask(seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, dims=(3, 4), n_subjects=12)
    cache = WhiteningCache.build(ds)
    for mask in ds.masks():
        sub, R = cache.pattern(mask)
        assert np.abs(R @ sub @ R - np.eye(len(sub))).max() < 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 3), d=st.integers(1, 3))
def test_commutation_under_working_structure(seed, K, d):
    rng = np.random.default_rng(seed)
    pk = 4
    G = np.vstack([np.linalg.qr(rng.standard_normal((pk, d)))[0] for _ in range(K)])
    p = G.shape[0]
    Q, _ = np.linalg.qr(np.hstack([G / math.sqrt(K), rng.standard_normal((p, p - d))]))
    L = Q[:, d:]
    lam = np.exp(rng.uniform(-1, 1, d))
    lam_e = np.exp(rng.uniform(-1, 1, p - d))
    Gn = G / math.sqrt(K)
    S = (Gn * lam) @ Gn.T + (L * lam_e) @ L.T
    S = 0.5 * (S + S.T)
    R = sym_inv_sqrt(S)
    M = G.T @ R @ G
    assert np.abs(M - np.diag(np.diag(M))).max() < 1e-8
    omega_bar_inv_sqrt = M / K
    assert np.abs(G @ omega_bar_inv_sqrt - R @ G).max() < 1e-8
