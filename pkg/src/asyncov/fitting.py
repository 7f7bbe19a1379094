"""Model fitting: initialisation, multi-chain sampling, estimand extraction and persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import Dataset, ModalityLayout, design_names
from .diagnostics import summarize_diagnostics
from .errors import ConfigError, DataError, NumericalError
from .estimands import (
    CALIBRATED_OFFSET,
    CovariateQuery,
    adjust_intercept,
    cross_corr_draw,
    cross_cov_draw,
    intercept_offset,
    summarize,
)
from .likelihood import LogPosterior, ModelConfig, ThetaLayout, to_model
from .matrix_io import read_matrix_csv, write_matrix_csv
from .sampler import PosteriorDraws, SamplerSettings, sample_chains
from .whitening import WhiteningCache

INIT_JITTER = 0.01
ORTHO_TOL = 1e-8


def init_theta(dataset: Dataset, whitener: WhiteningCache, config: ModelConfig, rng) -> np.ndarray:
    """Start from the leading eigenvectors of each modality's block of sigma_bar."""
    tl = ThetaLayout.from_config(config)
    theta = np.zeros(tl.size)
    S = whitener.sigma_bar
    lay = config.layout
    for k, sl in enumerate(tl.x_slices):
        blk = lay.block(k)
        _, V = np.linalg.eigh(S[blk, blk])
        top = V[:, ::-1][:, :tl.d]
        theta[sl] = (top + INIT_JITTER * rng.standard_normal(top.shape)).ravel()
    na = tl.a_slice.stop - tl.a_slice.start
    theta[tl.a_slice] = np.where(tl.a_diag, 0.0, INIT_JITTER * rng.standard_normal(na))
    theta[tl.bt_slice] = INIT_JITTER * rng.standard_normal(tl.d * tl.q)
    theta[tl.w_slice] = -1.0
    return theta


def run_chain(dataset: Dataset, whitener: WhiteningCache, settings: SamplerSettings,
              config: ModelConfig) -> PosteriorDraws:
    post = LogPosterior(dataset, whitener, config)
    inits = []
    for c in range(settings.chains):
        theta0 = init_theta(dataset, whitener, config, np.random.default_rng([settings.seed, c, 1]))
        if not np.isfinite(post.log_prob(theta0)):
            raise NumericalError("log posterior is not finite at the initial point")
        inits.append(theta0)
    return sample_chains(post, inits, settings, ThetaLayout.from_config(config).names())


def manifold_violations(theta_draws, config: ModelConfig, tol: float = ORTHO_TOL) -> int:
    """Number of draws whose loadings break per-block or stacked orthonormality."""
    tl = ThetaLayout.from_config(config)
    K, d = config.layout.K, config.rank
    bad = 0
    for theta in np.atleast_2d(theta_draws):
        p = to_model(theta, config, tl)
        ok = all(np.abs(G.T @ G - np.eye(d)).max() <= tol for G in p.gammas)
        Gs = p.gamma_stack
        ok = ok and np.abs(Gs.T @ Gs - K * np.eye(d)).max() <= tol
        bad += not ok
    return bad


@dataclass
class FitResult:
    config: ModelConfig
    settings: SamplerSettings
    draws: PosteriorDraws
    sigma_bar: np.ndarray
    covariate_names: tuple
    offset: str | float = CALIBRATED_OFFSET
    meta: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return self.draws.flat()

    @property
    def design_names(self) -> tuple:
        return design_names(self.covariate_names, self.config.include_time)

    def design(self, values: dict | None = None) -> np.ndarray:
        """Design vector from named covariate values; unnamed ones are 0."""
        values = dict(values or {})
        names = self.design_names[1:]
        unknown = sorted(set(values) - set(names))
        if unknown:
            raise ConfigError(f"unknown covariate(s) {unknown}; known: {list(names)}")
        return np.array([1.0] + [float(values.get(n, 0.0)) for n in names])

    def estimand_draws(self, query: CovariateQuery, kind: str = "cov", report=None):
        """Yield one estimand matrix per retained draw."""
        tl = ThetaLayout.from_config(self.config)
        sigma_inv = np.linalg.inv(self.sigma_bar)
        K = self.config.layout.K
        names = self.config.layout.variable_names
        for theta in self.theta:
            p = to_model(theta, self.config, tl)
            B = adjust_intercept(p.B_tilde, p.gamma_stack, None, K, self.offset,
                                 sigma_inv=sigma_inv, report=report)
            if kind == "cov":
                yield cross_cov_draw(p, B, query)
            elif kind == "corr":
                yield cross_corr_draw(p, B, query, names)
            else:
                raise ValueError(kind)

    def summary(self, query: CovariateQuery, kind: str = "cov", level: float = 0.05):
        return summarize(np.array(list(self.estimand_draws(query, kind))), level)

    def posterior_medians(self, designs: dict, pair=(0, 1)) -> tuple[dict, dict]:
        """Median cross-covariance and cross-correlation at each keyed design vector."""
        tl = ThetaLayout.from_config(self.config)
        sigma_inv = np.linalg.inv(self.sigma_bar)
        K = self.config.layout.K
        keys = list(designs)
        X = np.array([designs[k] for k in keys])
        k1, k2 = pair
        covs = np.empty((len(self.theta), len(keys), self.config.layout.dims[k1],
                         self.config.layout.dims[k2]))
        corrs = np.empty_like(covs)
        for r, theta in enumerate(self.theta):
            p = to_model(theta, self.config, tl)
            B = adjust_intercept(p.B_tilde, p.gamma_stack, None, K, self.offset, sigma_inv=sigma_inv)
            omega = np.exp(X @ B.T)
            G1, G2 = p.gammas[k1], p.gammas[k2]
            c = np.einsum("al,nl,bl->nab", G1, omega, G2)
            v1 = omega @ (G1 ** 2).T
            v2 = omega @ (G2 ** 2).T
            covs[r] = c
            corrs[r] = np.clip(c / np.sqrt(v1[:, :, None] * v2[:, None, :]), -1, 1)
        mc = np.median(covs, axis=0)
        mr = np.median(corrs, axis=0)
        return ({k: mc[i] for i, k in enumerate(keys)}, {k: mr[i] for i, k in enumerate(keys)})

    def diagnostics(self) -> dict:
        stacked = self.draws.stacked()
        diag = summarize_diagnostics(stacked, self.draws.names)
        return diag

    def calibration_report(self) -> dict:
        K = self.config.layout.K
        rep: dict = {}
        if len(self.theta):
            tl = ThetaLayout.from_config(self.config)
            sigma_inv = np.linalg.inv(self.sigma_bar)
            for theta in self.theta[:: max(1, len(self.theta) // 50)]:
                p = to_model(theta, self.config, tl)
                adjust_intercept(p.B_tilde, p.gamma_stack, None, K, self.offset,
                                 sigma_inv=sigma_inv, report=rep)
        return {
            "offset_used": self.offset,
            "offset_value": intercept_offset(K, self.offset),
            "doubled_form": "B[:,0] = Bt[:,0] - log diag(G^T S^-1 G) + 2 log K",
            "doubled_offset": intercept_offset(K, "doubled"),
            "calibrated_form": "B[:,0] = Bt[:,0] - log diag(G^T S^-1 G) + c, c from round trip",
            "calibrated_offset": intercept_offset(K, CALIBRATED_OFFSET),
            "max_relative_offdiag": rep.get("offdiag", 0.0),
        }

    # ---------------------------------------------------------------- persistence

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = self.draws.names
        with open(out / "draws.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw", *names])
            for c, ch in enumerate(self.draws.chains):
                for r, theta in enumerate(ch.draws):
                    w.writerow([c, r, *(repr(float(v)) for v in theta)])
        lay = self.config.layout
        write_matrix_csv(out / "sigma_bar.csv", self.sigma_bar, lay.variable_names, lay.variable_names)
        with open(out / "fit.json", "w", encoding="utf-8") as fh:
            json.dump(self.fit_record(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def fit_record(self) -> dict:
        lay = self.config.layout
        cfg = self.config
        return {
            "layout": {"dims": list(lay.dims), "modality_names": list(lay.modality_names),
                       "variable_names": list(lay.variable_names)},
            "model": {"rank": cfg.rank, "q": cfg.q, "n_subjects": cfg.n_subjects,
                      "prior_var": cfg.prior_var, "clamp": cfg.clamp,
                      "include_time": cfg.include_time},
            "covariate_names": list(self.covariate_names),
            "offset": self.offset,
            "settings": asdict(self.settings),
            "sampler": self.draws.summary(),
            "version": __version__,
            **self.meta,
        }

    @classmethod
    def load(cls, fit_dir) -> "FitResult":
        from .sampler import ChainResult

        d = Path(fit_dir)
        try:
            with open(d / "fit.json", encoding="utf-8") as fh:
                rec = json.load(fh)
        except OSError as exc:
            raise DataError(f"no fit found in {d}: {exc}") from exc
        lay = ModalityLayout(**{k: tuple(v) for k, v in rec["layout"].items()})
        m = rec["model"]
        config = ModelConfig(lay, m["rank"], m["q"], m["n_subjects"], m["prior_var"], m["clamp"],
                             m["include_time"])
        settings = SamplerSettings(**rec["settings"])
        with open(d / "draws.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        names = rows[0][2:]
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, -1)
        chains = []
        for c in range(int(data[:, 0].max()) + 1 if len(data) else 0):
            th = data[data[:, 0] == c, 2:]
            n = len(th)
            chains.append(ChainResult(th, np.zeros(n), np.zeros(n), np.zeros(n, int),
                                      np.zeros(n, int), np.zeros(n, bool), float("nan"),
                                      np.ones(th.shape[1])))
        sigma, _, _ = read_matrix_csv(d / "sigma_bar.csv")
        return cls(config, settings, PosteriorDraws(chains, names), sigma,
                   tuple(rec["covariate_names"]), rec.get("offset", CALIBRATED_OFFSET))


def fit(dataset: Dataset, rank: int, settings: SamplerSettings, include_time: bool = True,
        offset=CALIBRATED_OFFSET, prior_var: float = 3.0) -> FitResult:
    """Build the whitener, sample the posterior and wrap the draws."""
    config = ModelConfig.for_dataset(dataset, rank, include_time=include_time, prior_var=prior_var)
    whitener = WhiteningCache.build(dataset)
    draws = run_chain(dataset, whitener, settings, config)
    return FitResult(config, settings, draws, whitener.sigma_bar.copy(), dataset.covariate_names,
                     offset)
