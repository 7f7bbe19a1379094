import numpy as np
import pytest

from asyncov.diagnostics import RHAT_SENTINEL, ess, split_chains, split_rhat, summarize_diagnostics


def test_iid_rhat_and_ess(rng):
    x = rng.standard_normal((4, 1000, 5))
    r = split_rhat(x)
    assert np.all((r >= 0.99) & (r <= 1.02))
    e = ess(x)
    assert np.all(np.abs(e / 4000 - 1) < 0.2)


def test_constant_disagreeing_chains():
    x = np.stack([np.zeros(200), np.ones(200)])
    assert split_rhat(x)[0] == RHAT_SENTINEL


def test_shifted_chains_detected(rng):
    x = rng.standard_normal((2, 500))
    x[1] += 2.0
    assert split_rhat(x)[0] > 1.5


def test_autocorrelated_ess_smaller(rng):
    n = 4000
    e = rng.standard_normal(n)
    ar = np.empty(n)
    ar[0] = e[0]
    for t in range(1, n):
        ar[t] = 0.9 * ar[t - 1] + e[t]
    # AR(1) with phi = .9 has ESS ratio (1 - phi) / (1 + phi)
    assert ess(ar[None, :])[0] / n == pytest.approx(0.1 / 1.9, rel=0.35)


def test_split_chains_shape(rng):
    assert split_chains(rng.standard_normal((3, 101, 2))).shape == (6, 50, 2)


def test_single_chain_notice(rng):
    with pytest.warns(UserWarning, match="R-hat"):
        out = summarize_diagnostics(rng.standard_normal((1, 200, 2)), ["a", "b"])
    assert out["rhat"] is None
    assert "notice" in out
    assert len(out["ess"]) == 2
