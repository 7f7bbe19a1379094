"""Benchmark grid over fitted rank, synchrony and sample size."""

from __future__ import annotations

import csv
import itertools
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AsyncovError
from .fitting import fit
from .naive import naive_cross_cov
from .sampler import SamplerSettings
from .simulation import (
    SimConfig,
    coefficient_spread,
    covariate_grid,
    evaluation_loss,
    generate_truth,
    sim_design,
    simulate_dataset,
    truth_targets,
)

log = logging.getLogger(__name__)

COLUMNS = ("N", "n_i", "sync_pct", "rank", "rep", "method", "metric_target", "norm", "loss",
           "status", "coef_spread")
METHODS = ("proposed", "naive")
TARGETS = ("cov", "corr")
NORMS = ("frobenius", "max")


@dataclass(frozen=True)
class BenchmarkGrid:
    ranks: tuple = (1, 3, 5)
    sync_pcts: tuple = (1.0, 0.75, 0.5, 0.25)
    Ns: tuple = (30, 60)
    n_i: int = 5
    reps: int = 30
    seed: int = 0
    naive_subtract_blups: bool = True
    sampler: dict = field(default_factory=lambda: {
        "chains": 1, "warmup_iters": 500, "retained_draws": 500, "max_leapfrog_depth": 8})

    @classmethod
    def from_dict(cls, cfg: dict) -> "BenchmarkGrid":
        known = set(cls.__dataclass_fields__)
        extra = set(cfg) - known
        if extra:
            from .errors import ConfigError
            raise ConfigError(f"unknown benchmark config field(s): {sorted(extra)}")
        kw = dict(cfg)
        for k in ("ranks", "sync_pcts", "Ns"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def cells(self):
        return list(itertools.product(self.Ns, self.sync_pcts, self.ranks))


def job_seed(seed: int, N: int, rep: int) -> list[int]:
    """RNG key for one replication.

    Truth and data depend only on ``(seed, N, rep)``, so cells that differ in
    synchrony or rank share them (common random numbers) apart from the masks.
    """
    return [int(seed), int(N), int(rep)]


def run_replication(N, sync_pct, rank, rep, grid: BenchmarkGrid) -> list[dict]:
    """All result rows for one grid cell and replication."""
    base = {"N": N, "n_i": grid.n_i, "sync_pct": sync_pct, "rank": rank, "rep": rep}
    rng = np.random.default_rng(job_seed(grid.seed, N, rep))
    truth = generate_truth(rng)
    data_rng = np.random.default_rng(job_seed(grid.seed, N, rep) + [1])
    cfg = SimConfig(N=N, n_i=grid.n_i, sync_pct=sync_pct, rank=rank, seed=grid.seed)
    ds = simulate_dataset(truth, cfg, data_rng)
    true_cov, true_corr = truth_targets(truth)
    spread = coefficient_spread(truth)
    rows = []

    def emit(method, estimates, status="ok"):
        for target, truths in (("cov", true_cov), ("corr", true_corr)):
            for norm in NORMS:
                loss = float("nan")
                if status == "ok":
                    loss = evaluation_loss(estimates[target], truths, norm)
                rows.append({**base, "method": method, "metric_target": target, "norm": norm,
                             "loss": loss, "status": status, "coef_spread": spread})

    settings = SamplerSettings(seed=int(np.random.SeedSequence(
        job_seed(grid.seed, N, rep) + [int(rank), int(round(sync_pct * 1e6))]).generate_state(1)[0]),
        **grid.sampler)
    try:
        res = fit(ds, rank, settings, include_time=False)
        designs = {c: sim_design(*c) for c in covariate_grid()}
        mc, mr = res.posterior_medians(designs)
        status = "unreliable" if res.draws.unreliable else "ok"
        emit("proposed", {"cov": mc, "corr": mr})
        if status != "ok":
            for r in rows:
                r["status"] = status
    except (AsyncovError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("proposed fit failed N=%s sync=%s rank=%s rep=%s: %s", N, sync_pct, rank, rep, exc)
        emit("proposed", None, "failed")

    try:
        nv = naive_cross_cov(ds, subtract_blups=grid.naive_subtract_blups)
        if any(nv.get(c) is None or nv[c].status != "ok" for c in covariate_grid()):
            emit("naive", None, "insufficient data")
        else:
            emit("naive", {"cov": {c: nv[c].cov for c in covariate_grid()},
                           "corr": {c: nv[c].corr for c in covariate_grid()}})
    except (AsyncovError, np.linalg.LinAlgError) as exc:
        log.warning("naive fit failed: %s\n%s", exc, traceback.format_exc())
        emit("naive", None, "failed")
    return rows


def _job(args):
    return run_replication(*args)


def run_benchmark(grid: BenchmarkGrid, workers: int = 1) -> list[dict]:
    """Rows in deterministic (N, sync, rank, rep, method, target, norm) order."""
    jobs = [(N, s, r, rep, grid) for (N, s, r) in grid.cells() for rep in range(grid.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_job, jobs))
    else:
        chunks = [_job(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def write_results(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in COLUMNS})


def median_loss(rows, method, target="cov", norm="frobenius", **cell) -> float:
    vals = [r["loss"] for r in rows
            if r["method"] == method and r["metric_target"] == target and r["norm"] == norm
            and np.isfinite(r["loss"]) and all(r[k] == v for k, v in cell.items())]
    return float(np.median(vals)) if vals else float("nan")


def grid_dict(grid: BenchmarkGrid) -> dict:
    return asdict(grid)
