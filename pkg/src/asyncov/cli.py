"""Command-line entry point: ``asyncov simulate|fit|summarize|benchmark|validate``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .benchmark import BenchmarkGrid, grid_dict, median_loss, run_benchmark, write_results
from .data_model import LayoutConfig, ingest_csv, load_layout_config, save_layout_config, validate, write_csv
from .errors import AsyncovError, ConfigError, DataError
from .estimands import CovariateQuery, write_summary
from .fitting import FitResult, fit
from .matrix_io import write_matrix_csv
from .sampler import SamplerSettings
from .simulation import SimConfig, generate_truth, simulate_dataset

log = logging.getLogger("asyncov")

FIT_DEFAULTS = {"rank": 3, "chains": 4, "warmup": 1000, "draws": 2000, "seed": 0,
                "max_depth": 10, "target_accept": 0.8, "offset": "calibrated", "prior_var": 3.0}
SIM_DEFAULTS = {"N": 30, "n_i": 5, "sync_pct": 1.0, "seed": 0}


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return cfg


def _merge(defaults: dict, file_cfg: dict, flags: dict, what: str) -> dict:
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"{what} config: unknown field(s) {unknown}")
    out = {**defaults, **file_cfg}
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _versions() -> dict:
    import scipy

    return {"asyncov": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out_dir: Path, command: str, config: dict, started: float, **extra) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "versions": _versions(),
        "timing": {"seconds": round(time.time() - started, 3)},
        **extra,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    started = time.time()
    cfg = _merge(SIM_DEFAULTS, _load_yaml(args.config),
                 {"seed": args.seed, "N": args.n_subjects, "sync_pct": args.sync_pct}, "simulate")
    try:
        sim = SimConfig(N=int(cfg["N"]), n_i=int(cfg["n_i"]), sync_pct=float(cfg["sync_pct"]),
                        seed=int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate config: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(sim.seed)
    truth = generate_truth(rng)
    ds = simulate_dataset(truth, sim, rng)
    lay_cfg = LayoutConfig(ds.layout, ds.covariate_names, include_time=False)
    write_csv(ds, out / "data.csv", lay_cfg)
    save_layout_config(lay_cfg, out / "layout.yaml")
    names = ds.layout.variable_names
    tdir = out / "truth"
    tdir.mkdir(exist_ok=True)
    write_matrix_csv(tdir / "gamma_star.csv", truth.gamma_star, names, [f"e{j + 1}" for j in range(len(names))])
    design = ["intercept", "x1", "x2"]
    write_matrix_csv(tdir / "A_true.csv", truth.A_true, [f"e{j + 1}" for j in range(len(names))], design)
    write_matrix_csv(tdir / "B_true.csv", truth.B_true, [f"e{j + 1}" for j in range(len(names))], design)
    report = validate(ds)
    write_manifest(out, "simulate", {**cfg, "re_var": truth.re_var}, started,
                   validation={k: v for k, v in report.items() if k != "records_per_subject"})
    print(f"wrote {len(ds.records)} records to {out / 'data.csv'} "
          f"(synchrony {report['synchrony_pct']:.1f}%)")
    return 0


def _fit_settings(args) -> tuple[dict, SamplerSettings]:
    cfg = _merge(FIT_DEFAULTS, _load_yaml(args.config),
                 {"rank": args.rank, "chains": args.chains, "draws": args.draws,
                  "warmup": args.warmup, "seed": args.seed, "max_depth": args.max_depth},
                 "fit")
    try:
        settings = SamplerSettings(chains=int(cfg["chains"]), warmup_iters=int(cfg["warmup"]),
                                   retained_draws=int(cfg["draws"]),
                                   target_accept=float(cfg["target_accept"]),
                                   max_leapfrog_depth=int(cfg["max_depth"]), seed=int(cfg["seed"]),
                                   workers=int(args.workers or 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fit config: {exc}") from exc
    return cfg, settings


def cmd_fit(args) -> int:
    started = time.time()
    cfg, settings = _fit_settings(args)
    layout_cfg = load_layout_config(args.layout)
    rank = int(cfg["rank"])
    if rank > min(layout_cfg.layout.dims):
        raise ConfigError(f"--rank {rank} violates d <= min_k p_k = {min(layout_cfg.layout.dims)}")
    ds = ingest_csv(args.data, layout_cfg)
    res = fit(ds, rank, settings, include_time=layout_cfg.include_time, offset=cfg["offset"],
              prior_var=float(cfg["prior_var"]))
    res.meta = {"subject_ids": list(ds.subject_ids)}
    out = Path(args.out)
    res.save(out)
    diag = res.diagnostics()
    with open(out / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "rhat", "ess"])
        rhat = diag["rhat"] or [None] * len(diag["names"])
        for n, r, e in zip(diag["names"], rhat, diag["ess"]):
            w.writerow([n, "" if r is None else repr(float(r)), repr(float(e))])
    finite = [r for r in (diag["rhat"] or []) if np.isfinite(r)]
    diag_summary = {
        "max_rhat": max(finite) if finite else None,
        "min_ess": float(np.nanmin(diag["ess"])) if diag["ess"] else None,
        "notice": diag.get("notice"),
        **res.draws.summary(),
    }
    write_manifest(out, "fit", {**cfg, "data": str(args.data), "layout": str(args.layout),
                                "include_time": layout_cfg.include_time}, started,
                   diagnostics=diag_summary, intercept_calibration=res.calibration_report())
    print(f"fit rank {rank}: {len(res.theta)} draws, max R-hat {diag_summary['max_rhat']}, "
          f"divergences {sum(diag_summary['divergences'])}")
    if res.draws.unreliable:
        print("warning: more than 10% divergent transitions; draws flagged unreliable",
              file=sys.stderr)
    return 0


def parse_at(text: str | None) -> dict:
    values = {}
    if not text:
        return values
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"--at expects name=value pairs, got {part!r}")
        k, v = part.split("=", 1)
        try:
            values[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"--at: {k.strip()} has non-numeric value {v!r}") from None
    return values


def cmd_summarize(args) -> int:
    started = time.time()
    res = FitResult.load(args.draws)
    values = parse_at(args.at)
    try:
        pair = tuple(int(v) - 1 for v in args.pair.split(","))
    except ValueError:
        raise ConfigError(f"--pair expects two modality numbers, got {args.pair!r}") from None
    K = res.config.layout.K
    if len(pair) != 2 or not all(0 <= v < K for v in pair):
        raise ConfigError(f"--pair must name two modalities in 1..{K}")
    x = res.design(values)
    query = CovariateQuery(x, tuple(sorted(pair)))
    out = Path(args.out) if args.out else Path(args.draws) / "summary"
    lay = res.config.layout
    rows = lay.block_variables(query.pair[0])
    cols = lay.block_variables(query.pair[1])
    tags = {"covariates": {n: float(v) for n, v in zip(res.design_names, x)},
            "pair": [query.pair[0] + 1, query.pair[1] + 1], "level": args.level}
    flags_ok = True
    for kind in ("cov", "corr"):
        s = res.summary(query, kind, args.level)
        flags_ok &= bool(np.array_equal(s.flags, (s.lower > 0) | (s.upper < 0)))
        write_summary(s, out, kind, rows, cols, tags)
    write_manifest(out, "summarize", {"draws": str(args.draws), "at": values,
                                      "pair": list(tags["pair"]), "level": args.level,
                                      "seed": None}, started,
                   intercept_calibration=res.calibration_report(), flags_consistent=flags_ok)
    print(f"wrote summaries to {out}")
    return 0


def cmd_benchmark(args) -> int:
    started = time.time()
    cfg = _load_yaml(args.config)
    if args.reps is not None:
        cfg["reps"] = args.reps
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        grid = BenchmarkGrid.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(f"benchmark config: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(grid, workers=int(args.workers or 1))
    write_results(rows, out / "results.csv")
    ok_cells = {(r["N"], r["sync_pct"], r["rank"]) for r in rows
                if r["method"] == "proposed" and r["status"] != "failed"}
    medians = {}
    for N, s, rk in grid.cells():
        for m in ("proposed", "naive"):
            medians[f"N={N},sync={s},rank={rk},{m}"] = median_loss(rows, m, N=N, sync_pct=s, rank=rk)
    write_manifest(out, "benchmark", grid_dict(grid), started,
                   median_cov_frobenius=medians, n_rows=len(rows),
                   n_failed=sum(r["status"] == "failed" for r in rows))
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    if not ok_cells:
        print("error: every cell failed", file=sys.stderr)
        return 4
    return 0


def cmd_validate(args) -> int:
    layout_cfg = load_layout_config(args.layout)
    ds = ingest_csv(args.data, layout_cfg)
    report = validate(ds)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asyncov", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a bimodal asynchronous dataset")
    s.add_argument("--config", help="YAML with N, n_i, sync_pct, seed")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-subjects", type=int)
    s.add_argument("--sync-pct", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="sample the posterior for a dataset")
    f.add_argument("data", help="long-format CSV")
    f.add_argument("layout", help="layout YAML")
    f.add_argument("--config", help="YAML with rank, chains, draws, warmup, seed, max_depth, ...")
    f.add_argument("--rank", type=int)
    f.add_argument("--chains", type=int)
    f.add_argument("--draws", type=int, help="retained draws over all chains")
    f.add_argument("--warmup", type=int)
    f.add_argument("--max-depth", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--workers", type=int, default=os.cpu_count())
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("summarize", help="cross-covariance summaries at covariate values")
    m.add_argument("draws", help="output directory of a fit")
    m.add_argument("--at", default="", help='covariate values, e.g. "x1=1,x2=0.5"')
    m.add_argument("--pair", default="1,2", help="1-based modality pair")
    m.add_argument("--level", type=float, default=0.05)
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize)

    b = sub.add_parser("benchmark", help="simulation benchmark grid")
    b.add_argument("--config", help="grid YAML (ranks, sync_pcts, Ns, n_i, reps, seed, sampler)")
    b.add_argument("--reps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int, default=os.cpu_count())
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)

    v = sub.add_parser("validate", help="report masks and synchrony of a dataset")
    v.add_argument("data")
    v.add_argument("layout")
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AsyncovError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
