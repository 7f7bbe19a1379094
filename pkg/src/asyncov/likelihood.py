"""Parameter transforms, reduced latent-space likelihood, priors and gradients.

The sampler works on one flat unconstrained vector ``theta`` laid out as

    X^(1), ..., X^(K)   Gaussian expansions of the loading blocks (p_k x d each)
    A                   free upper-triangular entries, diagonal stored as logs
    B_tilde             d x q
    b                   N x d subject random effects
    log omega_b         d

Each loading block is the polar factor ``X (X^T X)^{-1/2}``.  With standard
normal ``X`` this puts a uniform prior on the Stiefel manifold.

Likelihood convention: every term free of sampled parameters is dropped, so a
record contributes ``-1/2 sum(eta) - 1/2 sum(z**2 exp(-eta))`` where
``eta = B_tilde x`` and ``z`` is the whitened latent projection of the residual.
The prior keeps its normalising constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import Dataset, ModalityLayout, ObservationRecord, build_design, group_by_mask
from .errors import ConfigError, NumericalError
from .whitening import WhiteningCache

LOG_VAR_CLAMP = 30.0
DEGENERATE_SV = 1e-10
_LOG_2PI = math.log(2 * math.pi)
_LOG_HALFNORMAL = math.log(2.0) - 0.5 * _LOG_2PI


@dataclass(frozen=True)
class ModelConfig:
    layout: ModalityLayout
    rank: int
    q: int
    n_subjects: int
    prior_var: float = 3.0
    clamp: float = LOG_VAR_CLAMP
    include_time: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be at least 1")
        if self.rank > min(self.layout.dims):
            raise ConfigError(f"rank d={self.rank} violates d <= min_k p_k = {min(self.layout.dims)}")
        if self.q < 1:
            raise ConfigError("design must contain at least the intercept")

    @classmethod
    def for_dataset(cls, dataset: Dataset, rank: int, include_time: bool = True, **kw):
        q = len(dataset.covariate_names) + (2 if include_time else 1)
        return cls(dataset.layout, rank, q, dataset.n_subjects, include_time=include_time, **kw)


@dataclass(frozen=True)
class ThetaLayout:
    """Slices of the flat parameter vector."""

    dims: tuple[int, ...]
    d: int
    q: int
    n_subjects: int
    x_slices: tuple[slice, ...] = field(init=False)
    a_index: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)
    a_slice: slice = field(init=False)
    a_diag: np.ndarray = field(init=False, repr=False)
    bt_slice: slice = field(init=False)
    b_slice: slice = field(init=False)
    w_slice: slice = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        pos = 0
        xs = []
        for pk in self.dims:
            xs.append(slice(pos, pos + pk * self.d))
            pos += pk * self.d
        rows, cols = [], []
        for l in range(self.d):
            for c in range(l, self.q):
                rows.append(l)
                cols.append(c)
        rows = np.array(rows, dtype=int)
        cols = np.array(cols, dtype=int)
        na = rows.size
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("x_slices", tuple(xs))
        set_("a_index", (rows, cols))
        set_("a_slice", slice(pos, pos + na))
        set_("a_diag", rows == cols)
        pos += na
        set_("bt_slice", slice(pos, pos + self.d * self.q))
        pos += self.d * self.q
        set_("b_slice", slice(pos, pos + self.n_subjects * self.d))
        pos += self.n_subjects * self.d
        set_("w_slice", slice(pos, pos + self.d))
        pos += self.d
        set_("size", pos)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "ThetaLayout":
        return cls(config.layout.dims, config.rank, config.q, config.n_subjects)

    def names(self) -> list[str]:
        out = []
        for k, pk in enumerate(self.dims):
            out += [f"X{k + 1}[{a},{l}]" for a in range(pk) for l in range(self.d)]
        out += [f"A[{l},{c}]" for l, c in zip(*self.a_index)]
        out += [f"Bt[{l},{c}]" for l in range(self.d) for c in range(self.q)]
        out += [f"b[{i},{l}]" for i in range(self.n_subjects) for l in range(self.d)]
        out += [f"log_omega_b[{l}]" for l in range(self.d)]
        return out


@dataclass
class ModelParams:
    gammas: list
    A: np.ndarray
    B_tilde: np.ndarray
    b: np.ndarray
    omega_b_diag: np.ndarray

    @property
    def gamma_stack(self) -> np.ndarray:
        return np.vstack(self.gammas)

    def gamma_masked(self, mask) -> np.ndarray:
        return np.vstack([self.gammas[k] for k in sorted(mask)])


def _polar(X):
    """Polar factor of ``X`` with the pieces needed for its derivative."""
    S = X.T @ X
    s, V = np.linalg.eigh(S)
    if s[0] <= DEGENERATE_SV ** 2 * max(s[-1], 1.0):
        raise NumericalError("degenerate expansion: loading expansion is rank deficient")
    M = (V * s ** -0.5) @ V.T
    return X @ M, M, s, V


def _polar_grad(X, M, s, V, G):
    """Pull ``G = df/dGamma`` back through ``Gamma = X (X^T X)^{-1/2}``."""
    H = X.T @ G
    r = s ** -0.5
    ds = s[:, None] - s[None, :]
    dr = r[:, None] - r[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(np.abs(ds) > 1e-12 * s.max(), dr / ds, 0.0)
    # repeated eigenvalues take the derivative limit
    close = np.abs(ds) <= 1e-12 * s.max()
    F = np.where(close, -0.5 * (0.5 * (s[:, None] + s[None, :])) ** -1.5, F)
    Hs = V.T @ (H + H.T) @ V
    return G @ M + X @ (V @ (F * Hs) @ V.T)


def to_model(theta: np.ndarray, config: ModelConfig, tl: ThetaLayout | None = None) -> ModelParams:
    tl = tl or ThetaLayout.from_config(config)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (tl.size,):
        raise ConfigError(f"theta has length {theta.size}, expected {tl.size}")
    d = tl.d
    gammas = [_polar(theta[sl].reshape(pk, d))[0] for sl, pk in zip(tl.x_slices, tl.dims)]
    raw = theta[tl.a_slice]
    A = np.zeros((d, tl.q))
    A[tl.a_index] = np.where(tl.a_diag, np.exp(raw), raw)
    return ModelParams(
        gammas=gammas,
        A=A,
        B_tilde=theta[tl.bt_slice].reshape(d, tl.q).copy(),
        b=theta[tl.b_slice].reshape(tl.n_subjects, d).copy(),
        omega_b_diag=np.exp(theta[tl.w_slice]),
    )


def from_model(params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Unconstrained vector whose expansion blocks are the loading blocks themselves."""
    tl = ThetaLayout.from_config(config)
    theta = np.zeros(tl.size)
    for sl, G in zip(tl.x_slices, params.gammas):
        theta[sl] = G.ravel()
    vals = params.A[tl.a_index]
    if np.any(vals[tl.a_diag] <= 0):
        raise ConfigError("A must have a positive diagonal")
    theta[tl.a_slice] = np.where(tl.a_diag, np.log(np.where(tl.a_diag, vals, 1.0)), vals)
    theta[tl.bt_slice] = params.B_tilde.ravel()
    theta[tl.b_slice] = params.b.ravel()
    theta[tl.w_slice] = np.log(params.omega_b_diag)
    return theta


# --------------------------------------------------------------------------
# Per-record reference path
# --------------------------------------------------------------------------

def project_residual(record: ObservationRecord, params: ModelParams, whitener: WhiteningCache,
                     subject_row: int, include_time: bool = True) -> np.ndarray:
    x = build_design(record, include_time)
    G = params.gamma_masked(record.mask)
    W = whitener.inv_sqrt(record.mask)
    h = params.A @ x + params.b[subject_row]
    return G.T @ (W @ (record.y_obs - G @ h)) / record.m


def loglik_record(record: ObservationRecord, params: ModelParams, whitener: WhiteningCache,
                  subject_row: int, include_time: bool = True, clamp: float = LOG_VAR_CLAMP,
                  counter: dict | None = None) -> float:
    z = project_residual(record, params, whitener, subject_row, include_time)
    eta = params.B_tilde @ build_design(record, include_time)
    over = np.abs(eta) > clamp
    if over.any() and counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + int(over.sum())
    eta = np.clip(eta, -clamp, clamp)
    return float(-0.5 * eta.sum() - 0.5 * np.sum(z ** 2 * np.exp(-eta)))


def log_prior(params: ModelParams, theta: np.ndarray, config: ModelConfig) -> float:
    return _prior_and_grad(np.asarray(theta, float), ThetaLayout.from_config(config),
                           config.prior_var, want_grad=False)[0]


def _prior_and_grad(theta, tl: ThetaLayout, prior_var: float, want_grad=True):
    d = tl.d
    g = np.zeros_like(theta) if want_grad else None
    lp = 0.0

    xs = np.concatenate([theta[sl] for sl in tl.x_slices])
    lp += -0.5 * xs @ xs - 0.5 * _LOG_2PI * xs.size
    if want_grad:
        for sl in tl.x_slices:
            g[sl] = -theta[sl]

    v = prior_var
    const = -0.5 * math.log(2 * math.pi * v)
    raw = theta[tl.a_slice]
    a_val = np.where(tl.a_diag, np.exp(raw), raw)
    lp += np.sum(-0.5 * a_val ** 2 / v + const) + raw[tl.a_diag].sum()
    if want_grad:
        g[tl.a_slice] = np.where(tl.a_diag, -a_val ** 2 / v + 1.0, -a_val / v)

    bt = theta[tl.bt_slice]
    lp += np.sum(-0.5 * bt ** 2 / v + const)
    if want_grad:
        g[tl.bt_slice] = -bt / v

    s = theta[tl.w_slice]
    omega = np.exp(s)
    b = theta[tl.b_slice].reshape(tl.n_subjects, d)
    n = tl.n_subjects
    ssq = np.sum(b ** 2, axis=0)
    lp += np.sum(-0.5 * n * (_LOG_2PI + s) - 0.5 * ssq / omega)
    lp += np.sum(_LOG_HALFNORMAL - 0.5 * omega ** 2 + s)
    if want_grad:
        g[tl.b_slice] = (-b / omega).ravel()
        g[tl.w_slice] = -0.5 * n + 0.5 * ssq / omega - omega ** 2 + 1.0
    return float(lp), g


# --------------------------------------------------------------------------
# Vectorised posterior
# --------------------------------------------------------------------------

@dataclass(eq=False)
class _Group:
    mask: tuple[int, ...]
    Y: np.ndarray
    X: np.ndarray
    subj: np.ndarray
    W: np.ndarray
    block_rows: list


class LogPosterior:
    """Log posterior and gradient over ``theta`` for a fixed dataset and whitener.

    Records sharing a modality mask are evaluated together; groups are summed
    in ascending mask order so results do not depend on scheduling.
    """

    def __init__(self, dataset: Dataset, whitener: WhiteningCache, config: ModelConfig):
        if dataset.layout != config.layout:
            raise ConfigError("dataset layout does not match model config")
        if dataset.n_subjects != config.n_subjects:
            raise ConfigError("dataset subject count does not match model config")
        self.config = config
        self.tl = ThetaLayout.from_config(config)
        self.clamped = 0
        rows = dataset.subject_rows()
        X = dataset.design_matrix(config.include_time)
        if len(dataset.records) and X.shape[1] != config.q:
            raise ConfigError(f"design has {X.shape[1]} columns, config expects q={config.q}")
        lay = config.layout
        self.groups = []
        for mask, idx in group_by_mask(dataset).items():
            Y = np.array([dataset.records[i].y_obs for i in idx])
            blocks, pos = [], 0
            for k in mask:
                blocks.append((k, slice(pos, pos + lay.dims[k])))
                pos += lay.dims[k]
            self.groups.append(_Group(mask, Y, X[idx], rows[idx], whitener.inv_sqrt(mask), blocks))

    @property
    def dim(self) -> int:
        return self.tl.size

    def __call__(self, theta):
        return self.value_and_grad(theta)

    def _unpack(self, theta):
        tl = self.tl
        polars = [_polar(theta[sl].reshape(pk, tl.d)) for sl, pk in zip(tl.x_slices, tl.dims)]
        raw = theta[tl.a_slice]
        A = np.zeros((tl.d, tl.q))
        A[tl.a_index] = np.where(tl.a_diag, np.exp(raw), raw)
        Bt = theta[tl.bt_slice].reshape(tl.d, tl.q)
        b = theta[tl.b_slice].reshape(tl.n_subjects, tl.d)
        return polars, A, Bt, b

    def loglik(self, theta, want_grad=False):
        theta = np.asarray(theta, dtype=float)
        tl = self.tl
        polars, A, Bt, b = self._unpack(theta)
        gammas = [p[0] for p in polars]
        clamp = self.config.clamp
        ll = 0.0
        gG = [np.zeros_like(G) for G in gammas]
        gA = np.zeros_like(A)
        gBt = np.zeros_like(Bt)
        gb = np.zeros_like(b)
        for grp in self.groups:
            m = len(grp.mask)
            G = np.vstack([gammas[k] for k in grp.mask])
            P = (G.T @ grp.W) / m
            H = grp.X @ A.T + b[grp.subj]
            E = grp.Y - H @ G.T
            Z = E @ P.T
            eta_raw = grp.X @ Bt.T
            over = np.abs(eta_raw) > clamp
            if over.any():
                self.clamped += int(over.sum())
            eta = np.clip(eta_raw, -clamp, clamp)
            inv = np.exp(-eta)
            Z2 = Z * Z * inv
            ll += -0.5 * eta.sum() - 0.5 * Z2.sum()
            if not want_grad:
                continue
            gZ = -Z * inv
            geta = np.where(over, 0.0, 0.5 * (Z2 - 1.0))
            gBt += geta.T @ grp.X
            gH = -gZ @ (P @ G)
            gA += gH.T @ grp.X
            np.add.at(gb, grp.subj, gH)
            gGm = grp.W @ (E.T @ gZ) / m - P.T @ (gZ.T @ H)
            for k, sl in grp.block_rows:
                gG[k] += gGm[sl]
        if not want_grad:
            return float(ll), None
        grad = np.zeros_like(theta)
        for sl, (X, M, s, V), gk, pk in zip(tl.x_slices, polars, gG, tl.dims):
            grad[sl] = _polar_grad(theta[sl].reshape(pk, tl.d), M, s, V, gk).ravel()
        raw = theta[tl.a_slice]
        ga = gA[tl.a_index]
        grad[tl.a_slice] = np.where(tl.a_diag, ga * np.exp(raw), ga)
        grad[tl.bt_slice] = gBt.ravel()
        grad[tl.b_slice] = gb.ravel()
        return float(ll), grad

    def log_prob(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        lp, _ = _prior_and_grad(theta, self.tl, self.config.prior_var, want_grad=False)
        ll, _ = self.loglik(theta)
        return lp + ll

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        lp, gp = _prior_and_grad(theta, self.tl, self.config.prior_var)
        ll, gl = self.loglik(theta, want_grad=True)
        return lp + ll, gp + gl


def log_posterior(theta, dataset: Dataset, whitener: WhiteningCache, config: ModelConfig) -> float:
    return LogPosterior(dataset, whitener, config).log_prob(theta)


def grad_log_posterior(theta, dataset: Dataset, whitener: WhiteningCache,
                       config: ModelConfig) -> np.ndarray:
    return LogPosterior(dataset, whitener, config).value_and_grad(theta)[1]
