"""Empirical covariance under asynchronous observation and per-pattern whiteners."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import Dataset, ModalityLayout
from .errors import DataError, NumericalError

FLOOR_REL = 1e-6
SYMMETRY_RTOL = 1e-10


@dataclass(eq=False)
class EmpiricalCov:
    sigma_bar: np.ndarray
    floor: float
    means: np.ndarray | None = None
    n_clipped: int = 0
    _patterns: dict = field(default_factory=dict, repr=False)


def _clip_spectrum(M, floor_rel):
    w, V = np.linalg.eigh(M)
    top = w.max()
    if top <= 0:
        raise NumericalError("matrix has no positive eigenvalue")
    floor = floor_rel * top
    low = w < floor
    return w, V, floor, int(low.sum())


def empirical_covariance(dataset: Dataset, floor_rel: float = FLOOR_REL) -> EmpiricalCov:
    """Pairwise-complete covariance, centred at available-case means.

    Pairs co-observed in fewer than two records get 0.  The result is repaired
    to be positive definite by raising eigenvalues below ``floor_rel`` times the
    largest one; a matrix that needs no repair is returned unchanged.
    """
    Y = dataset.dense()
    obs = ~np.isnan(Y)
    counts = obs.sum(axis=0)
    names = dataset.layout.variable_names
    for a in np.flatnonzero(counts < 2):
        raise DataError(f"variable {names[a]!r} observed in {counts[a]} records; need at least 2")
    means = np.nanmean(Y, axis=0)
    C = np.where(obs, Y - means, 0.0)
    O = obs.astype(float)
    pair_n = O.T @ O
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(pair_n >= 2, (C.T @ C) / (pair_n - 1), 0.0)
    S = 0.5 * (S + S.T)

    w, V, floor, n_low = _clip_spectrum(S, floor_rel)
    if n_low:
        S = (V * np.maximum(w, floor)) @ V.T
        S = 0.5 * (S + S.T)
    return EmpiricalCov(S, floor, means, n_low)


def sym_inv_sqrt(M: np.ndarray, floor_rel: float = FLOOR_REL) -> np.ndarray:
    """Symmetric inverse square root via eigendecomposition with eigenvalue clipping."""
    M = np.asarray(M, dtype=float)
    scale = max(np.abs(M).max(), 1e-300)
    if np.abs(M - M.T).max() > SYMMETRY_RTOL * scale:
        raise NumericalError("sym_inv_sqrt: input is not symmetric")
    w, V, floor, _ = _clip_spectrum(0.5 * (M + M.T), floor_rel)
    R = (V * np.maximum(w, floor) ** -0.5) @ V.T
    return 0.5 * (R + R.T)


def pattern_whitener(cov: EmpiricalCov, mask, layout: ModalityLayout):
    """``(sigma_sub, sigma_sub^{-1/2})`` for the variables in ``mask``, memoized on ``cov``."""
    key = tuple(sorted(mask))
    if not key:
        raise DataError("empty modality mask")
    hit = cov._patterns.get(key)
    if hit is None:
        idx = layout.indices(key)
        sub = cov.sigma_bar[np.ix_(idx, idx)]
        hit = (sub, sym_inv_sqrt(sub))
        cov._patterns[key] = hit
    return hit


@dataclass(eq=False)
class WhiteningCache:
    """Read-only whitening factors for every mask seen in a dataset."""

    cov: EmpiricalCov
    layout: ModalityLayout

    @classmethod
    def build(cls, dataset: Dataset, floor_rel: float = FLOOR_REL,
              cov: EmpiricalCov | None = None) -> "WhiteningCache":
        if cov is None:
            cov = empirical_covariance(dataset, floor_rel)
        cache = cls(cov, dataset.layout)
        for m in dataset.masks():
            cache.pattern(m)
        return cache

    @classmethod
    def from_sigma(cls, sigma_bar, layout: ModalityLayout, floor_rel: float = FLOOR_REL):
        sigma_bar = np.asarray(sigma_bar, dtype=float)
        w, _, floor, _ = _clip_spectrum(0.5 * (sigma_bar + sigma_bar.T), floor_rel)
        if w.min() < floor:
            raise NumericalError("sigma_bar is not positive definite")
        return cls(EmpiricalCov(sigma_bar, floor), layout)

    @property
    def sigma_bar(self) -> np.ndarray:
        return self.cov.sigma_bar

    def pattern(self, mask):
        return pattern_whitener(self.cov, mask, self.layout)

    def inv_sqrt(self, mask) -> np.ndarray:
        return self.pattern(mask)[1]

