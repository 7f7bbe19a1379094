"""Cross-covariance and cross-correlation estimands from posterior draws."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, NumericalError
from .likelihood import ModelParams
from .matrix_io import write_matrix_csv

DOUBLED_OFFSET = "doubled"
CALIBRATED_OFFSET = "calibrated"


@dataclass(frozen=True)
class CovariateQuery:
    """A design vector and a 0-based modality pair ``(k, k2)`` with ``k <= k2``."""

    design: np.ndarray
    pair: tuple[int, int]

    def __post_init__(self):
        x = np.asarray(self.design, dtype=float).reshape(-1)
        if x.size == 0 or x[0] != 1.0:
            raise ConfigError("design vector must start with the intercept 1")
        k, k2 = (int(v) for v in self.pair)
        if k < 0 or k2 < k:
            raise ConfigError(f"modality pair {self.pair} must satisfy 0 <= k <= k'")
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "pair", (k, k2))


@dataclass
class CrossCovSummary:
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flags: np.ndarray
    level: float

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "median": self.median.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "flags": self.flags.astype(int).tolist(),
        }


# --------------------------------------------------------------------------
# Intercept adjustment
# --------------------------------------------------------------------------

def _working_spectral_instance(dims, d, rng):
    """Loading blocks, complement basis and sigma_bar with exact working structure."""
    K = len(dims)
    blocks = [np.linalg.qr(rng.standard_normal((pk, d)))[0] for pk in dims]
    G = np.vstack(blocks)
    p = G.shape[0]
    Q, _ = np.linalg.qr(np.hstack([G / math.sqrt(K), rng.standard_normal((p, p - d))]))
    L = Q[:, d:]
    lam = np.exp(rng.uniform(-1.0, 1.0, d))
    lam_e = np.exp(rng.uniform(-1.0, 1.0, p - d))
    Gn = G / math.sqrt(K)
    sigma = (Gn * lam) @ Gn.T + (L * lam_e) @ L.T
    return G, L, lam, lam_e, 0.5 * (sigma + sigma.T)


def _shift_raw(gamma_stack, sigma_inv):
    M = gamma_stack.T @ sigma_inv @ gamma_stack
    diag = np.diag(M)
    if np.any(diag <= 0):
        raise NumericalError("Gamma^T Sigma^-1 Gamma has a nonpositive diagonal entry")
    off = M - np.diag(diag)
    off_mag = float(np.abs(off).max() / np.abs(diag).max()) if M.shape[0] > 1 else 0.0
    return -np.log(diag), off_mag


@lru_cache(maxsize=None)
def calibrate_intercept_offset(K: int, d: int = 3, p_k: int = 6, seed: int = 20240101) -> float:
    """Additive intercept constant that makes the log-map round trip exact.

    Builds a sigma_bar with exact working spectral structure, computes the
    projected latent variance a generating covariance implies, and solves for
    the constant that returns the generating log-variances.
    """
    from .whitening import sym_inv_sqrt

    rng = np.random.default_rng(seed)
    G, L, lam, lam_e, sigma = _working_spectral_instance([p_k] * K, d, rng)
    log_omega = rng.uniform(-1.0, 1.0, d)
    gen = (G * np.exp(log_omega)) @ G.T + (L * lam_e) @ L.T
    P = G.T @ sym_inv_sqrt(sigma) / K
    bt_int = np.log(np.diag(P @ gen @ P.T))
    shift, _ = _shift_raw(G, np.linalg.inv(sigma))
    c = log_omega - (bt_int + shift)
    if np.ptp(c) > 1e-8:
        raise NumericalError(f"round-trip constant is not uniform across latent directions: {c}")
    return float(c.mean())


def intercept_offset(K: int, offset: str | float = CALIBRATED_OFFSET) -> float:
    if offset == DOUBLED_OFFSET:
        return 2.0 * math.log(K)
    if offset == CALIBRATED_OFFSET:
        return calibrate_intercept_offset(K)
    return float(offset)


def adjust_intercept(B_tilde, gamma_stack, sigma_bar, K: int, offset=CALIBRATED_OFFSET,
                     sigma_inv=None, report: dict | None = None) -> np.ndarray:
    """Map Euclidean-space coefficients to the log-variance coefficients ``B``.

    Only the intercept column moves, by ``-log diag(G^T S^-1 G) + c``.  ``offset``
    selects ``c``: ``"calibrated"`` (round-trip exact, the default), ``"doubled"``
    (``2 log K``) or a number.  The relative off-diagonal size of ``G^T S^-1 G``
    is written to ``report["offdiag"]`` when a dict is passed.
    """
    B_tilde = np.asarray(B_tilde, dtype=float)
    G = np.asarray(gamma_stack, dtype=float)
    if not np.allclose(G.T @ G, K * np.eye(G.shape[1]), atol=1e-6):
        raise NumericalError("stacked loadings do not satisfy G^T G = K I")
    if sigma_inv is None:
        sigma_inv = np.linalg.inv(np.asarray(sigma_bar, dtype=float))
    shift, off = _shift_raw(G, sigma_inv)
    B = B_tilde.copy()
    B[:, 0] = B_tilde[:, 0] + shift + intercept_offset(K, offset)
    if report is not None:
        report["offdiag"] = max(report.get("offdiag", 0.0), off)
    return B


def latent_cov(B, design) -> np.ndarray:
    return np.exp(np.asarray(B) @ np.asarray(design, dtype=float))


# --------------------------------------------------------------------------
# Per-draw estimands
# --------------------------------------------------------------------------

def cross_cov_draw(params: ModelParams, B, query: CovariateQuery) -> np.ndarray:
    k, k2 = query.pair
    omega = latent_cov(B, query.design)
    return (params.gammas[k] * omega) @ params.gammas[k2].T


def cross_corr_draw(params: ModelParams, B, query: CovariateQuery, names=None) -> np.ndarray:
    k, k2 = query.pair
    omega = latent_cov(B, query.design)
    Gk, Gk2 = params.gammas[k], params.gammas[k2]
    cov = (Gk * omega) @ Gk2.T
    var_k = (Gk ** 2) @ omega
    var_k2 = (Gk2 ** 2) @ omega
    for var in (var_k, var_k2):
        bad = np.flatnonzero(var <= 0)
        if bad.size:
            label = names[bad[0]] if names is not None else f"index {bad[0]}"
            raise NumericalError(f"zero implied variance for variable {label}")
    return np.clip(cov / np.sqrt(np.outer(var_k, var_k2)), -1.0, 1.0)


def summarize(draws: Iterable[np.ndarray], level: float = 0.05) -> CrossCovSummary:
    """Elementwise median and equal-tailed interval (linear-interpolated quantiles)."""
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    stack = np.asarray(list(draws) if not isinstance(draws, np.ndarray) else draws, dtype=float)
    if stack.shape[0] < 2:
        raise ConfigError("summarize needs at least 2 draws")
    lo, med, hi = np.quantile(stack, [level / 2, 0.5, 1 - level / 2], axis=0, method="linear")
    flags = (lo > 0) | (hi < 0)
    return CrossCovSummary(med, lo, hi, flags, level)


def write_summary(summary: CrossCovSummary, out_dir, prefix: str, row_names, col_names,
                  tags: dict | None = None) -> None:
    """CSV per matrix plus one JSON carrying all matrices and the query tags."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for part in ("median", "lower", "upper"):
        write_matrix_csv(out / f"{prefix}_{part}.csv", getattr(summary, part), row_names, col_names)
    write_matrix_csv(out / f"{prefix}_flags.csv", summary.flags.astype(int), row_names, col_names,
                     fmt=str)
    payload = {"query": tags or {}, "rows": list(row_names), "cols": list(col_names),
               **summary.to_dict()}
    with open(out / f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
