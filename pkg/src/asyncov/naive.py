"""Naive comparator: per-variable random-intercept models, then complete-case
residual cross-covariance within each covariate category."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .data_model import Dataset
from .errors import DataError

MIN_COMPLETE_CASES = 3
_LOG_LAMBDA_BOUNDS = (-20.0, 10.0)


@dataclass
class LmmFit:
    beta: np.ndarray
    sigma_b2: float
    sigma_e2: float
    blups: dict
    boundary: bool = False
    reml_objective: float = float("nan")


def _reml_pieces(lam, Xg, yg):
    """-2 REML log likelihood (up to a constant) for variance ratio ``lam``."""
    n, p = sum(len(y) for y in yg), Xg[0].shape[1]
    XtX = np.zeros((p, p))
    Xty = np.zeros(p)
    yty = 0.0
    logdet = 0.0
    for X, y in zip(Xg, yg):
        ni = len(y)
        c = lam / (1.0 + lam * ni)
        sx = X.sum(axis=0)
        sy = y.sum()
        XtX += X.T @ X - c * np.outer(sx, sx)
        Xty += X.T @ y - c * sx * sy
        yty += y @ y - c * sy * sy
        logdet += math.log1p(lam * ni)
    beta = np.linalg.solve(XtX, Xty)
    rss = yty - beta @ Xty
    s2 = max(rss, 1e-300) / (n - p)
    obj = (n - p) * math.log(s2) + logdet + np.linalg.slogdet(XtX)[1]
    return obj, beta, s2


def fit_lmm_single(y, X, subject_ids) -> LmmFit:
    """Random-intercept model fitted by REML over the variance ratio sigma_b2 / sigma_e2."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    subject_ids = np.asarray(subject_ids)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DataError("design and response sizes differ")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("design matrix is rank deficient on the available cases")
    subjects = list(dict.fromkeys(subject_ids.tolist()))
    if len(subjects) < 2:
        raise DataError("need at least 2 subjects")
    if y.size - X.shape[1] < 1:
        raise DataError("not enough observations for the fixed effects")
    rows = {s: np.flatnonzero(subject_ids == s) for s in subjects}
    Xg = [X[rows[s]] for s in subjects]
    yg = [y[rows[s]] for s in subjects]

    obj0, beta0, s20 = _reml_pieces(0.0, Xg, yg)
    if all(len(v) == 1 for v in yg):
        lam, obj, beta, s2, boundary = 0.0, obj0, beta0, s20, True
    else:
        res = minimize_scalar(lambda t: _reml_pieces(math.exp(t), Xg, yg)[0],
                              bounds=_LOG_LAMBDA_BOUNDS, method="bounded",
                              options={"xatol": 1e-8})
        lam = math.exp(res.x)
        obj, beta, s2 = _reml_pieces(lam, Xg, yg)
        boundary = obj0 <= obj or res.x <= _LOG_LAMBDA_BOUNDS[0] + 1e-3
        if boundary:
            lam, obj, beta, s2 = 0.0, obj0, beta0, s20

    blups = {}
    for s, Xi, yi in zip(subjects, Xg, yg):
        ni = len(yi)
        blups[s] = float(lam * ni / (1.0 + lam * ni) * np.mean(yi - Xi @ beta))
    return LmmFit(beta, lam * s2, s2, blups, bool(boundary), float(obj))


def categorical_design(dataset: Dataset, categorical=None):
    """Intercept plus reference-coded dummies; returns the matrix, column labels and levels."""
    names = list(dataset.covariate_names)
    categorical = names if categorical is None else list(categorical)
    unknown = [c for c in categorical if c not in names]
    if unknown:
        raise DataError(f"unknown categorical covariate(s) {unknown}")
    C = dataset.covariate_matrix()
    cols = [np.ones(len(dataset.records))]
    labels = ["intercept"]
    levels = {}
    for c in categorical:
        v = C[:, names.index(c)]
        lv = np.unique(v)
        levels[c] = lv
        for level in lv[1:]:
            cols.append((v == level).astype(float))
            labels.append(f"{c}={level:g}")
    return np.column_stack(cols), labels, levels


@dataclass
class NaiveEntry:
    cov: np.ndarray | None
    corr: np.ndarray | None
    n_complete: int
    status: str = "ok"


def naive_residuals(dataset: Dataset, X: np.ndarray, subtract_blups: bool = True) -> np.ndarray:
    """``n x p`` residual matrix (NaN where unobserved) from per-variable fits."""
    Y = dataset.dense()
    sid = np.array([r.subject_id for r in dataset.records])
    E = np.full_like(Y, np.nan)
    for a in range(Y.shape[1]):
        rows = np.flatnonzero(~np.isnan(Y[:, a]))
        f = fit_lmm_single(Y[rows, a], X[rows], sid[rows])
        r = Y[rows, a] - X[rows] @ f.beta
        if subtract_blups:
            r = r - np.array([f.blups[s] for s in sid[rows]])
        E[rows, a] = r
    return E


def naive_cross_cov(dataset: Dataset, categorical=None, pair=(0, 1),
                    subtract_blups: bool = True) -> dict:
    """Residual cross-covariance and cross-correlation per category combination.

    Keys are tuples of covariate values in ``categorical`` order.  Combinations
    with fewer than three records observing both modalities are flagged
    ``insufficient data`` and carry no matrices.
    """
    X, _, levels = categorical_design(dataset, categorical)
    cats = list(levels)
    E = naive_residuals(dataset, X, subtract_blups)
    lay = dataset.layout
    r1, r2 = lay.block(pair[0]), lay.block(pair[1])
    C = dataset.covariate_matrix()
    idx = [list(dataset.covariate_names).index(c) for c in cats]
    both = np.array([pair[0] in r.mask and pair[1] in r.mask for r in dataset.records])
    out = {}
    combos = sorted({tuple(row) for row in C[:, idx].tolist()}) if len(C) else []
    for combo in combos:
        sel = both & np.all(C[:, idx] == np.array(combo), axis=1)
        n = int(sel.sum())
        if n < MIN_COMPLETE_CASES:
            out[combo] = NaiveEntry(None, None, n, "insufficient data")
            continue
        E1 = E[sel][:, r1]
        E2 = E[sel][:, r2]
        E1 = E1 - E1.mean(axis=0)
        E2 = E2 - E2.mean(axis=0)
        cov = E1.T @ E2 / (n - 1)
        sd1 = np.sqrt(np.sum(E1 ** 2, axis=0) / (n - 1))
        sd2 = np.sqrt(np.sum(E2 ** 2, axis=0) / (n - 1))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.clip(cov / np.outer(sd1, sd2), -1.0, 1.0)
        out[combo] = NaiveEntry(cov, corr, n)
    return out
