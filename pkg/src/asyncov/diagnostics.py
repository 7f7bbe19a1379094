"""Split R-hat and effective sample size for multi-chain draws."""

from __future__ import annotations

import warnings

import numpy as np

RHAT_SENTINEL = 1.0e6


def _as_chains(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("expected (chains, draws) or (chains, draws, dim)")
    return x


def split_chains(x):
    x = _as_chains(x)
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)


def split_rhat(x) -> np.ndarray:
    """Potential scale reduction on split chains, one value per coordinate.

    Chains that are internally constant but disagree return ``RHAT_SENTINEL``.
    """
    s = split_chains(x)
    m, n = s.shape[0], s.shape[1]
    means = s.mean(axis=1)
    B = n * means.var(axis=0, ddof=1)
    W = s.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r = np.where((W == 0) & (B > 0), RHAT_SENTINEL, r)
    r = np.where((W == 0) & (B == 0), 1.0, r)
    return r


def _autocov(x):
    """Autocovariance of each column of ``x`` (draws, dim) via FFT."""
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=0)
    ac = np.fft.irfft(f * np.conjugate(f), n=size, axis=0)[:n]
    return ac / n


def ess(x) -> np.ndarray:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = _as_chains(x)
    m, n, dim = x.shape
    acov = np.stack([_autocov(x[c]) for c in range(m)])  # (m, n, dim)
    chain_mean = x.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean(axis=0)
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus = var_plus + chain_mean.var(axis=0, ddof=1)
    out = np.empty(dim)
    for j in range(dim):
        if var_plus[j] <= 0:
            out[j] = np.nan
            continue
        rho = 1.0 - (W[j] - acov[:, :, j].mean(axis=0)) / var_plus[j]
        rho[0] = 1.0
        # sum consecutive pairs while positive, enforcing monotone decrease
        total = 0.0
        prev = np.inf
        t = 0
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            total += pair
            prev = pair
            t += 2
        tau = -1.0 + 2.0 * total
        tau = max(tau, 1.0 / np.log10(m * n + 10))
        out[j] = m * n / tau
    return out


def summarize_diagnostics(draws, names=None) -> dict:
    """R-hat and ESS per coordinate; R-hat is omitted for a single chain."""
    x = _as_chains(draws)
    names = list(names) if names is not None else [str(i) for i in range(x.shape[2])]
    out = {"names": names, "ess": ess(x).tolist()}
    if x.shape[0] < 2:
        warnings.warn("R-hat needs at least 2 chains; omitted", stacklevel=2)
        out["rhat"] = None
        out["notice"] = "R-hat omitted: fewer than 2 chains"
    else:
        out["rhat"] = split_rhat(x).tolist()
    return out
